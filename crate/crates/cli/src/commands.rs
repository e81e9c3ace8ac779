//! Subcommand implementations.

use std::collections::BTreeMap;
use std::io::Write;

use plda_core::calibration::cv_calibrate;
use plda_core::data::{
    read_dataset, read_model, read_scores, read_trials, write_dataset, write_model, write_scores,
    write_trials, CondTag, LabeledDataset, Model, ScoreSet, TrialKey, TrialList, TrialScore,
};
use plda_core::error::{Error, Result};
use plda_core::joint::{jplda_em_fit, jplda_init_smart, jplda_score, ConditionPriors, JpldaFitOptions};
use plda_core::metrics::{evaluate, LabeledScores};
use plda_core::oracle;
use plda_core::preprocess::{fit_lda, read_pipeline, write_pipeline};
use plda_core::standard::{em_fit, init_random, init_smart_splda, score_trials, PldaVariant};
use plda_core::synth::{
    gen_model, gen_train_test, gen_trials, BalanceSpec, ConditionAssignment, NoiseSpec,
    SampleCount, ScenarioConfig,
};
use plda_core::tied::{tplda_fit, tplda_score};

use crate::manifest::ManifestBuilder;
use crate::{EvalArgs, PreprocessArgs, ScoreArgs, SynthArgs, TrainArgs};

const N_DET_POINTS: usize = 200;

fn preset_config(name: &str, seed: u64) -> ScenarioConfig {
    // desk-scale population: five conditions with condition 0 holding ~70%
    // of the samples, and either some or no speakers seen in two conditions
    let bilingual_fraction = match name {
        "single-lan" => 0.0,
        _ => 0.15,
    };
    ScenarioConfig {
        dim: 20,
        r_y: 4,
        r_x: 2,
        n_speakers: 300,
        n_conditions: 5,
        samples_per_pair: SampleCount::Uniform { min: 4, max: 8 },
        bilingual_fraction,
        condition_skew: Some(vec![0.7, 0.075, 0.075, 0.075, 0.075]),
        condition_assignment: ConditionAssignment::Skewed,
        speaker_scale: 0.3,
        condition_scale: 0.2,
        noise: NoiseSpec::Isotropic { variance: 0.03 },
        seed,
    }
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("synth");
    manifest.seed(args.seed);
    let mut config = match (&args.config, &args.preset) {
        (Some(path), None) => {
            manifest.input(path);
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_str::<ScenarioConfig>(&text)
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => preset_config(name, args.seed),
        _ => {
            return Err(Error::invalid_arg(
                "exactly one of --config or --preset is required",
            ))
        }
    };
    config.seed = args.seed;
    config.validate()?;

    std::fs::create_dir_all(&args.out_dir).map_err(|source| Error::Io {
        path: args.out_dir.clone(),
        source,
    })?;

    let model = gen_model(&config, args.seed)?;
    let (train, test) = gen_train_test(&model, &config, args.test_speakers)?;
    let trials = gen_trials(&test, &BalanceSpec { per_cell: args.trials_per_cell }, args.seed)?;

    let model_path = args.out_dir.join("model.json");
    let train_path = args.out_dir.join("train.tsv");
    let test_path = args.out_dir.join("test.tsv");
    let trials_path = args.out_dir.join("trials.tsv");
    write_model(&Model::Jplda(model), &model_path)?;
    write_dataset(&train, &train_path)?;
    write_dataset(&test, &test_path)?;
    write_trials(&trials, &trials_path)?;

    manifest
        .output(&model_path)
        .output(&train_path)
        .output(&test_path)
        .output(&trials_path);
    manifest
        .write_next_to(args.out_dir.join("outputs"))
        .map_err(|source| Error::Io {
            path: args.out_dir.clone(),
            source,
        })?;
    println!(
        "synth: {} train samples, {} test samples, {} trials",
        train.len(),
        test.len(),
        trials.len()
    );
    Ok(())
}

pub fn preprocess(args: PreprocessArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("preprocess");
    manifest.input(&args.data);
    let dataset = read_dataset(&args.data)?;
    let pipeline = match (&args.pipeline, &args.save_pipeline) {
        (Some(path), None) => {
            manifest.input(path);
            read_pipeline(path)?
        }
        (None, Some(save)) => {
            let dim = args.fit_dim.unwrap_or(dataset.dim());
            let pipeline = fit_lda(&dataset, dim)?;
            write_pipeline(&pipeline, save)?;
            manifest.output(save);
            pipeline
        }
        _ => {
            return Err(Error::invalid_arg(
                "use either --pipeline or --save-pipeline (optionally with --fit-dim)",
            ))
        }
    };
    let transformed = pipeline.apply(&dataset)?;
    write_dataset(&transformed, &args.out)?;
    manifest.output(&args.out);
    manifest.write_next_to(&args.out).map_err(|source| Error::Io {
        path: args.out.clone(),
        source,
    })?;
    println!(
        "preprocess: {} samples -> dimension {}",
        transformed.len(),
        transformed.dim()
    );
    Ok(())
}

fn parse_component_map(text: &str) -> Result<BTreeMap<String, usize>> {
    let mut map = BTreeMap::new();
    for part in text.split(',') {
        let (name, comp) = part.split_once('=').ok_or_else(|| {
            Error::invalid_arg(format!("component map entry '{part}' is not name=index"))
        })?;
        let idx: usize = comp
            .parse()
            .map_err(|_| Error::invalid_arg(format!("component index '{comp}' is not a number")))?;
        map.insert(name.to_string(), idx);
    }
    Ok(map)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("train");
    manifest.seed(args.seed).input(&args.data);
    let dataset = read_dataset(&args.data)?;

    let init_kind = args.init.as_deref().unwrap_or(match args.model.as_str() {
        "fplda" => "random",
        _ => "smart",
    });
    let default_iters = match (args.model.as_str(), init_kind) {
        ("jplda", "smart") => 1,
        ("splda", "smart") => 0,
        ("tplda", _) => 20,
        _ => 50,
    };
    let iters = args.iters.unwrap_or(default_iters);
    let rx = args.rx.unwrap_or(match args.model.as_str() {
        "splda" | "tplda" => 0,
        _ => 16,
    });

    let (model, trace) = match args.model.as_str() {
        "splda" => {
            if rx != 0 {
                return Err(Error::invalid_arg("splda has no channel factor; drop --rx"));
            }
            let init = match init_kind {
                "smart" => init_smart_splda(&dataset, args.ry)?,
                _ => init_random(dataset.dim(), args.ry, 0, args.seed)?,
            };
            let (params, trace) = em_fit(&dataset, &init, PldaVariant::Splda, iters, args.d_diagonal)?;
            (Model::Splda(params), trace)
        }
        "fplda" => {
            if init_kind == "smart" {
                return Err(Error::invalid_arg(
                    "fplda has no closed-form initialization; use --init random",
                ));
            }
            if rx == 0 {
                return Err(Error::invalid_arg("fplda needs a channel rank of at least 1"));
            }
            let init = init_random(dataset.dim(), args.ry, rx, args.seed)?;
            let (params, trace) = em_fit(&dataset, &init, PldaVariant::Fplda, iters, true)?;
            (Model::Fplda(params), trace)
        }
        "tplda" => {
            if init_kind != "smart" {
                return Err(Error::invalid_arg(
                    "tplda always uses its per-component closed-form initialization",
                ));
            }
            let map_text = args.component_map.as_deref().ok_or_else(|| {
                Error::invalid_arg("tplda needs --component-map, e.g. eng=0,spa=1")
            })?;
            let map = parse_component_map(map_text)?;
            // per-component noise is diagonal in the tied mixture
            let (params, trace) = tplda_fit(&dataset, &map, args.ry, iters, true)?;
            (Model::Tplda(params), trace)
        }
        "jplda" => {
            let init = match init_kind {
                "smart" => jplda_init_smart(&dataset, args.ry, rx, args.d_diagonal)?,
                _ => init_random(dataset.dim(), args.ry, rx, args.seed)?,
            };
            let opts = JpldaFitOptions {
                n_iters: iters,
                d_diagonal: args.d_diagonal,
                ..Default::default()
            };
            let (params, trace) = jplda_em_fit(&dataset, &init, &opts)?;
            (Model::Jplda(params), trace)
        }
        other => return Err(Error::invalid_arg(format!("unknown model '{other}'"))),
    };

    write_model(&model, &args.out)?;
    let mut stdout = std::io::stdout().lock();
    for (i, ll) in trace.iter().enumerate() {
        writeln!(stdout, "{i}\t{ll:.10e}").map_err(|source| Error::Io {
            path: "stdout".into(),
            source,
        })?;
    }
    manifest.output(&args.out);
    manifest.write_next_to(&args.out).map_err(|source| Error::Io {
        path: args.out.clone(),
        source,
    })?;
    Ok(())
}

/// Scores through the dense reference implementation instead of the fast
/// factorizations. Slow by design and capped in input size.
fn score_with_oracle(
    model: &Model,
    enroll: &LabeledDataset,
    test: &LabeledDataset,
    trials: &TrialList,
    priors: &ConditionPriors,
    known_condition: bool,
) -> Result<ScoreSet> {
    let e_idx = enroll.id_lookup();
    let t_idx = test.id_lookup();
    let lse = |a: f64, b: f64, p: f64| {
        if p == 1.0 {
            a
        } else if p == 0.0 {
            b
        } else {
            let (x, y) = (p.ln() + a, (1.0 - p).ln() + b);
            let m = x.max(y);
            m + ((x - m).exp() + (y - m).exp()).ln()
        }
    };
    let mut rows = Vec::with_capacity(trials.len());
    for t in trials.trials() {
        let ei = *e_idx
            .get(t.enroll_id.as_str())
            .ok_or_else(|| Error::data(format!("unknown enroll id '{}'", t.enroll_id)))?;
        let ti = *t_idx
            .get(t.test_id.as_str())
            .ok_or_else(|| Error::data(format!("unknown test id '{}'", t.test_id)))?;
        let e = enroll.vectors().column(ei).clone_owned();
        let x = test.vectors().column(ti).clone_owned();
        let log_lr = match model {
            Model::Splda(p) | Model::Fplda(p) => {
                let ss = oracle::build_joint_standard(p, &[0, 0])?;
                let ds = oracle::build_joint_standard(p, &[0, 1])?;
                let mut pair = nalgebra::DVector::zeros(2 * p.dim());
                pair.rows_mut(0, p.dim()).copy_from(&e);
                pair.rows_mut(p.dim(), p.dim()).copy_from(&x);
                oracle::logpdf(&ss, &pair)? - oracle::logpdf(&ds, &pair)?
            }
            Model::Jplda(p) => {
                let ll = |same_speaker: bool, same_condition: bool| {
                    oracle::trial_loglik(
                        p,
                        &e,
                        &x,
                        oracle::TrialHypothesis {
                            same_speaker,
                            same_condition,
                        },
                    )
                };
                if known_condition {
                    match t.cond {
                        CondTag::Same => ll(true, true)? - ll(false, true)?,
                        CondTag::Cross => ll(true, false)? - ll(false, false)?,
                        CondTag::Unknown => {
                            return Err(Error::data(format!(
                                "trial ({}, {}) lacks the same/cross tag",
                                t.enroll_id, t.test_id
                            )))
                        }
                    }
                } else {
                    lse(ll(true, true)?, ll(true, false)?, priors.p_sc_given_ss())
                        - lse(ll(false, true)?, ll(false, false)?, priors.p_sc_given_ds())
                }
            }
            Model::Tplda(m) => {
                let e_conds = enroll.require_conditions()?;
                let t_conds = test.require_conditions()?;
                let ke = m.component_of_condition(e_conds.name(e_conds.assignments()[ei]))?;
                let kt = m.component_of_condition(t_conds.name(t_conds.assignments()[ti]))?;
                oracle::trial_loglik_tied(m, &e, &x, (ke, kt), true)?
                    - oracle::trial_loglik_tied(m, &e, &x, (ke, kt), false)?
            }
        };
        rows.push(TrialScore {
            enroll_id: t.enroll_id.clone(),
            test_id: t.test_id.clone(),
            log_lr,
        });
    }
    ScoreSet::new(rows)
}

pub fn score(args: ScoreArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("score");
    manifest
        .input(&args.model_file)
        .input(&args.enroll)
        .input(&args.test)
        .input(&args.trials);
    let model = read_model(&args.model_file)?;
    let enroll = read_dataset(&args.enroll)?;
    let test = read_dataset(&args.test)?;
    let trials = read_trials(&args.trials)?;
    let priors = ConditionPriors::new(args.p_same_cond_ss, args.p_same_cond_ds)?;

    let jplda_flags_touched =
        args.p_same_cond_ss != 0.5 || args.p_same_cond_ds != 0.5 || args.known_condition;
    if jplda_flags_touched && !matches!(model, Model::Jplda(_)) {
        return Err(Error::invalid_arg(
            "condition priors and --known-condition apply to jplda models only",
        ));
    }

    let scores = if args.use_oracle {
        score_with_oracle(&model, &enroll, &test, &trials, &priors, args.known_condition)?
    } else {
        match &model {
            Model::Splda(p) | Model::Fplda(p) => score_trials(p, &enroll, &test, &trials)?,
            Model::Tplda(m) => tplda_score(m, &enroll, &test, &trials)?,
            Model::Jplda(p) => {
                jplda_score(p, &enroll, &test, &trials, &priors, args.known_condition)?
            }
        }
    };
    write_scores(&scores, &args.out)?;
    manifest.output(&args.out);
    manifest.write_next_to(&args.out).map_err(|source| Error::Io {
        path: args.out.clone(),
        source,
    })?;
    println!("score: {} trials", scores.len());
    Ok(())
}

/// Orders a score file to match the trial list, joining on the id pair.
fn align_scores(scores: &ScoreSet, trials: &TrialList) -> Result<ScoreSet> {
    let mut by_pair: std::collections::HashMap<(&str, &str), &TrialScore> = scores
        .scores()
        .iter()
        .map(|s| ((s.enroll_id.as_str(), s.test_id.as_str()), s))
        .collect();
    if by_pair.len() != scores.len() {
        return Err(Error::data("duplicate trial pair in the score file"));
    }
    let mut rows = Vec::with_capacity(trials.len());
    for t in trials.trials() {
        let s = by_pair
            .remove(&(t.enroll_id.as_str(), t.test_id.as_str()))
            .ok_or_else(|| {
                Error::data(format!("no score for trial ({}, {})", t.enroll_id, t.test_id))
            })?;
        rows.push(s.clone());
    }
    if !by_pair.is_empty() {
        return Err(Error::data(format!(
            "{} scores do not correspond to any trial",
            by_pair.len()
        )));
    }
    ScoreSet::new(rows)
}

/// Union-find over sample ids linked by target trials: each component is one
/// speaker for calibration splitting.
fn speakers_from_target_links(trials: &TrialList) -> Vec<(String, String)> {
    use std::collections::HashMap;
    let mut parent: HashMap<&str, &str> = HashMap::new();
    fn find<'a>(parent: &mut HashMap<&'a str, &'a str>, x: &'a str) -> &'a str {
        let mut root = x;
        while let Some(&p) = parent.get(root) {
            if p == root {
                break;
            }
            root = p;
        }
        let mut cur = x;
        while let Some(&p) = parent.get(cur) {
            if p == cur {
                break;
            }
            parent.insert(cur, root);
            cur = p;
        }
        root
    }
    for t in trials.trials() {
        parent.entry(&t.enroll_id).or_insert(&t.enroll_id);
        parent.entry(&t.test_id).or_insert(&t.test_id);
        if t.key == TrialKey::Target {
            let a = find(&mut parent, &t.enroll_id);
            let b = find(&mut parent, &t.test_id);
            if a != b {
                // deterministic union: smaller id becomes the root
                if a < b {
                    parent.insert(b, a);
                } else {
                    parent.insert(a, b);
                }
            }
        }
    }
    trials
        .trials()
        .iter()
        .map(|t| {
            (
                find(&mut parent, &t.enroll_id).to_string(),
                find(&mut parent, &t.test_id).to_string(),
            )
        })
        .collect()
}

fn summary_line(prefix: &str, labeled: &LabeledScores) -> Result<String> {
    let report = evaluate(labeled, N_DET_POINTS)?;
    Ok(format!(
        "{prefix}eer={:.6} cllr={:.6} n_tgt={} n_imp={}",
        report.eer, report.cllr, report.n_target, report.n_impostor
    ))
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("eval");
    manifest.seed(args.seed).input(&args.scores).input(&args.trials);
    let trials = read_trials(&args.trials)?;
    let scores = align_scores(&read_scores(&args.scores)?, &trials)?;

    let labeled = LabeledScores::from_trials(&scores, &trials)?;
    let report = evaluate(&labeled, N_DET_POINTS)?;

    let mut det = String::from("p_fa\tp_miss\tprobit_fa\tprobit_miss\n");
    for p in &report.det {
        det.push_str(&format!(
            "{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\n",
            p.p_fa, p.p_miss, p.probit_fa, p.probit_miss
        ));
    }
    std::fs::write(&args.out_det, det).map_err(|source| Error::Io {
        path: args.out_det.clone(),
        source,
    })?;
    manifest.output(&args.out_det);

    println!(
        "eer={:.6} cllr={:.6} n_tgt={} n_imp={}",
        report.eer, report.cllr, report.n_target, report.n_impostor
    );

    if args.subset_by_condition {
        if trials.trials().iter().any(|t| t.cond == CondTag::Unknown) {
            return Err(Error::data(
                "subset breakdown needs a same/cross tag on every trial",
            ));
        }
        for (tag, want) in [("same", CondTag::Same), ("cross", CondTag::Cross)] {
            let keep: Vec<usize> = (0..trials.len())
                .filter(|&i| trials.trials()[i].cond == want)
                .collect();
            let sub_scores = ScoreSet::new(
                keep.iter().map(|&i| scores.scores()[i].clone()).collect(),
            )?;
            let sub_trials = TrialList::new(
                keep.iter().map(|&i| trials.trials()[i].clone()).collect(),
            )?;
            let sub = LabeledScores::from_trials(&sub_scores, &sub_trials)?;
            println!("{}", summary_line(&format!("subset={tag} "), &sub)?);
        }
    }

    if let Some(n_splits) = args.calibrate_cv {
        let speakers = speakers_from_target_links(&trials);
        let cv = cv_calibrate(&scores, &trials, &speakers, n_splits, args.seed, 0.5)?;
        let kept_trials = TrialList::new(
            cv.kept.iter().map(|&i| trials.trials()[i].clone()).collect(),
        )?;
        let calibrated = LabeledScores::from_trials(&cv.scores, &kept_trials)?;
        println!("{}", summary_line("calibrated ", &calibrated)?);
    }
    Ok(())
}
