//! Matcher commands: training, retrieval evaluation, gradient checking, and
//! the temperature sweep.

use crate::context::{
    load_corpus, load_features_for, load_matcher_checkpoint, parse_ks, save_matcher_checkpoint,
    write_artifact,
};
use crate::Ctx;
use anyhow::{bail, Context, Result};
use relmatch_core::matcher::{self, MatcherHyper, MatcherParams};
use relmatch_core::metrics::{self, EvalConfig};
use relmatch_core::rng::substream;
use relmatch_core::visenc::{synth_features, SynthSpec};
use serde::Serialize;
use std::path::Path;

pub fn train_matcher(ctx: &Ctx, captions: &Path, features_dir: &Path) -> Result<()> {
    let config = &ctx.config;
    let corpus = load_corpus(captions)?;
    let features = load_features_for(&corpus, features_dir, config)?;
    let vocab = corpus.build_vocabulary()?;

    let mut params = MatcherParams::init(
        vocab.len(),
        config.embed_dim,
        config.h,
        config.d_v,
        config.d_r,
        &mut substream(config.seed, "init"),
    );
    let hyper = config.matcher_hyper();
    let outcome = matcher::train_matcher(
        &mut params,
        &hyper,
        &corpus,
        &features,
        &vocab,
        &config.matcher_train(),
    )?;

    std::fs::create_dir_all(&ctx.out)?;
    let checkpoint_path = ctx.out.join("matcher.rsck");
    save_matcher_checkpoint(&checkpoint_path, &params, config, &vocab)?;
    vocab.save(&ctx.out.join("vocab.txt"))?;

    #[derive(Serialize)]
    struct LossCurve {
        steps: u64,
        loss_per_step: Vec<f64>,
    }
    let curve_path = write_artifact(
        &ctx.out,
        "matcher_loss_curve.json",
        config,
        LossCurve {
            steps: outcome.steps,
            loss_per_step: outcome.loss_curve.clone(),
        },
    )?;
    println!(
        "trained {} steps, final loss {:.6}",
        outcome.steps,
        outcome.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", checkpoint_path.display());
    println!("loss curve: {}", curve_path.display());
    Ok(())
}

pub fn eval_retrieval(
    ctx: &Ctx,
    captions: &Path,
    features_dir: &Path,
    checkpoint: &Path,
    folds: usize,
    ks: &str,
) -> Result<()> {
    let loaded = load_matcher_checkpoint(checkpoint)?;
    // the checkpoint's config governs dims; the invocation config only
    // contributes the seed echo
    let mut config = loaded.config.clone();
    config.seed = ctx.config.seed;
    let corpus = load_corpus(captions)?;
    let features = load_features_for(&corpus, features_dir, &config)?;
    let eval = EvalConfig {
        folds,
        recall_ks: parse_ks(ks)?,
        max_len: config.max_len,
    };
    let report = metrics::eval_retrieval(
        &loaded.params,
        &loaded.hyper,
        &corpus,
        &features,
        &loaded.vocab,
        &eval,
    )?;
    print!("{}", metrics::format_table(&report));
    let path = write_artifact(&ctx.out, "retrieval.json", &config, &report)?;
    println!("report: {}", path.display());
    Ok(())
}

pub fn gradcheck(ctx: &Ctx, tol: f64) -> Result<()> {
    let seed = ctx.config.seed;
    let spec = SynthSpec {
        regions: 3,
        relations: 2,
        region_dim: 8,
        relation_dim: 8,
        label_count: 4,
    };
    let features: Vec<_> = (0..2)
        .map(|i| synth_features(seed, i, spec, None))
        .collect();
    let tokens = vec![vec![4usize, 5, 6], vec![7usize, 4]];
    let params = MatcherParams::init(8, 32, 8, 8, 8, &mut substream(seed, "gradcheck"));
    let report = full_matcher_gradcheck(&params, &MatcherHyper::default(), &features, &tokens, tol)?;
    println!("matcher loss gradient: {report}");

    let cap_config = relmatch_core::captioner::CaptionerConfig {
        vocab_size: 8,
        embed_dim: 3,
        feature_dim: 3,
        hidden: 8,
        attention_dim: 2,
        region_dim: 8,
        relation_dim: 8,
    };
    let cap_params =
        relmatch_core::captioner::CaptionerParams::init(&cap_config, &mut substream(seed, "cap"));
    let cap_report = captioner_gradcheck(&cap_params, &features[0], tol)?;
    println!("captioner loss gradient: {cap_report}");

    #[derive(Serialize)]
    struct GradcheckReportOut {
        matcher_max_rel_err: f64,
        captioner_max_rel_err: f64,
        tolerance: f64,
        passed: bool,
    }
    let passed = report.passed() && cap_report.passed();
    write_artifact(
        &ctx.out,
        "gradcheck.json",
        &ctx.config,
        GradcheckReportOut {
            matcher_max_rel_err: report.max_rel_err,
            captioner_max_rel_err: cap_report.max_rel_err,
            tolerance: tol,
            passed,
        },
    )?;
    if !passed {
        bail!("gradient check failed");
    }
    Ok(())
}

fn full_matcher_gradcheck(
    params: &MatcherParams,
    hyper: &MatcherHyper,
    features: &[relmatch_core::visenc::VisualFeatureSet],
    tokens: &[Vec<usize>],
    tol: f64,
) -> Result<relmatch_core::diffcore::GradCheckReport> {
    use relmatch_core::diffcore::{compare_gradients, numeric_gradient, Array, Tape};
    use relmatch_core::params::ParamBindings;

    let forward = |p: &MatcherParams| -> relmatch_core::Result<(f64, Vec<Array>)> {
        let mut tape = Tape::new();
        let mut reg = ParamBindings::new();
        let nodes = p.bind(&mut tape, &mut reg);
        let batch: Vec<matcher::PairItem<'_>> = features
            .iter()
            .zip(tokens)
            .map(|(f, t)| matcher::PairItem {
                image_id: f.image_id,
                features: f,
                token_ids: t,
            })
            .collect();
        let (loss, _) = matcher::batch_loss_on_tape(&mut tape, &nodes, &batch, hyper)?;
        let value = tape.value(loss).scalar_value();
        tape.backward(loss)?;
        let grads = reg.gradients(&tape);
        let ordered = p.named().iter().map(|(n, _)| grads[n].clone()).collect();
        Ok((value, ordered))
    };
    let (_, analytic) = forward(params)?;
    let flat: Vec<Array> = params.named().iter().map(|(_, a)| (*a).clone()).collect();
    let numeric = numeric_gradient(
        |ps| {
            let mut rebuilt = params.clone();
            for ((_, slot), value) in rebuilt.named_mut().into_iter().zip(ps) {
                *slot = value.clone();
            }
            forward(&rebuilt).map(|(v, _)| v)
        },
        &flat,
        1e-5,
    )?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}

fn captioner_gradcheck(
    params: &relmatch_core::captioner::CaptionerParams,
    features: &relmatch_core::visenc::VisualFeatureSet,
    tol: f64,
) -> Result<relmatch_core::diffcore::GradCheckReport> {
    use relmatch_core::captioner::{prepare_visual, xe_loss, xe_loss_on_tape};
    use relmatch_core::diffcore::{compare_gradients, numeric_gradient, Array, Tape};
    use relmatch_core::params::ParamBindings;
    use relmatch_core::textenc::Vocabulary;

    let ids = vec![Vocabulary::BOS_ID, 4, 5, Vocabulary::EOS_ID];
    let named = params.named();
    let flat: Vec<Array> = named.iter().map(|(_, a)| (*a).clone()).collect();
    let analytic: Vec<Array> = {
        let mut tape = Tape::new();
        let mut reg = ParamBindings::new();
        let nodes = params.bind(&mut tape, &mut reg);
        let visual = prepare_visual(&mut tape, &nodes, features)?;
        let loss = xe_loss_on_tape(&mut tape, &nodes, &visual, &ids)?;
        tape.backward(loss)?;
        let grads = reg.gradients(&tape);
        named.iter().map(|(n, _)| grads[n].clone()).collect()
    };
    let numeric = numeric_gradient(
        |ps| {
            let mut rebuilt = params.clone();
            for ((_, slot), value) in rebuilt.named_mut().into_iter().zip(ps) {
                *slot = value.clone();
            }
            xe_loss(&ids, features, &rebuilt)
        },
        &flat,
        1e-5,
    )?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}

pub fn sweep_temperature(
    ctx: &Ctx,
    captions: &Path,
    features_dir: &Path,
    val_captions: Option<&Path>,
    lambdas: &str,
) -> Result<()> {
    let mut values = Vec::new();
    for part in lambdas.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let v: f64 = part
            .parse()
            .with_context(|| format!("bad temperature {part:?}"))?;
        if v <= 0.0 {
            bail!("temperatures must be positive, got {v}");
        }
        values.push(v);
    }
    if values.is_empty() {
        bail!("no temperatures given");
    }

    let train_corpus = load_corpus(captions)?;
    let eval_corpus = match val_captions {
        Some(path) => load_corpus(path)?,
        None => train_corpus.clone(),
    };
    let train_features = load_features_for(&train_corpus, features_dir, &ctx.config)?;
    let eval_features = load_features_for(&eval_corpus, features_dir, &ctx.config)?;
    let vocab = train_corpus.build_vocabulary()?;

    #[derive(Serialize)]
    struct SweepRow {
        lambda: f64,
        text_to_image_r1: f64,
        image_to_text_r1: f64,
        recall_sum: f64,
    }
    let mut rows = Vec::new();
    println!("{:>8} {:>16} {:>16} {:>12}", "lambda", "t2i r@1", "i2t r@1", "r@1 sum");
    for &lambda in &values {
        let mut config = ctx.config.clone();
        config.lambda_rgn = lambda;
        config.lambda_rel = lambda;
        let mut params = MatcherParams::init(
            vocab.len(),
            config.embed_dim,
            config.h,
            config.d_v,
            config.d_r,
            &mut substream(config.seed, "init"),
        );
        let hyper = config.matcher_hyper();
        matcher::train_matcher(
            &mut params,
            &hyper,
            &train_corpus,
            &train_features,
            &vocab,
            &config.matcher_train(),
        )?;
        let report = metrics::eval_retrieval(
            &params,
            &hyper,
            &eval_corpus,
            &eval_features,
            &vocab,
            &EvalConfig {
                folds: 1,
                recall_ks: vec![1],
                max_len: config.max_len,
            },
        )?;
        let t2i = report.mean_text_to_image.recall[&1];
        let i2t = report.mean_image_to_text.recall[&1];
        println!("{lambda:>8} {t2i:>16.4} {i2t:>16.4} {:>12.4}", t2i + i2t);
        rows.push(SweepRow {
            lambda,
            text_to_image_r1: t2i,
            image_to_text_r1: i2t,
            recall_sum: t2i + i2t,
        });
    }
    // ties go to the first (lowest) temperature
    let mut best = rows[0].lambda;
    let mut best_sum = rows[0].recall_sum;
    for row in &rows[1..] {
        if row.recall_sum > best_sum {
            best = row.lambda;
            best_sum = row.recall_sum;
        }
    }
    println!("best temperature by r@1 sum: {best}");

    #[derive(Serialize)]
    struct Sweep {
        rows: Vec<SweepRow>,
        best_lambda: f64,
    }
    let path = write_artifact(
        &ctx.out,
        "temperature_sweep.json",
        &ctx.config,
        Sweep {
            rows,
            best_lambda: best,
        },
    )?;
    println!("sweep: {}", path.display());
    Ok(())
}
