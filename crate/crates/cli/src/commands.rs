use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use ssn_core::analysis::{
    contribution_counts, energy_csv, erf_map, export_offsets, keypoint_offset_scores, window_energies, ScoreNorm,
    ScoreOptions,
};
use ssn_core::checkpoint::Checkpoint;
use ssn_core::fsm::export::write_offset_csv;
use ssn_core::fsm::CaVariant;
use ssn_core::posenet::{build_3block3fsm, build_resnet50_fsm, count_flops, count_params, layer_costs, FlopConvention, Model};
use ssn_core::selfcheck::{gradient_suite, oracle_suite, CheckKind};
use ssn_core::trainer::{evaluate_loss, SynthSample, SynthSpec, TaskSpec, Trainer};
use ssn_core::Tensor4;

use crate::config::{output_dir, AnalysisConfig, RunConfig};
use crate::{Analyze, AnalyzeArgs, CliError, Convention, CountArgs, CountModel};

pub const CHECKPOINT_FILE: &str = "checkpoint.ssnc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ORACLE_TOLERANCE: f64 = 1e-6;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn offsets_snapshot(model: &Model<f32>) -> Result<Option<String>, CliError> {
    let active: Vec<String> = model.graph.fsm_ids().into_iter().filter(|id| model.is_fsm_active(id)).collect();
    if active.is_empty() {
        return Ok(None);
    }
    let rows = export_offsets(model)?
        .into_iter()
        .filter(|r| active.contains(&r.module_id))
        .collect::<Vec<_>>();
    Ok(Some(write_offset_csv(&rows)))
}

pub fn train(config: &Path, out: Option<&Path>, iterations: Option<u64>, resume: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(n) = iterations {
        cfg.train.iterations = n;
    }
    let dir = output_dir(out, Some(&cfg.output.dir));
    create_dir(&dir)?;
    let train_spec = cfg.data.train_spec();
    let eval_spec = cfg.data.eval_spec();
    let data = train_spec.generate()?;
    let eval_set = eval_spec.generate()?;
    let synth = match train_spec {
        TaskSpec::CueTarget(s) => s,
        TaskSpec::ShiftedCopy(_) => SynthSpec::default(),
    };

    let mut trainer = match resume {
        Some(path) => {
            let mut t = Checkpoint::load(path)?.into_trainer()?;
            t.config.iterations = cfg.train.iterations;
            log::info!("resuming from {} at iteration {}", path.display(), t.iteration);
            t
        }
        None => {
            let model = Model::init(cfg.graph()?, cfg.network.init_seed)?;
            Trainer::new(model, cfg.train.clone(), synth)?
        }
    };

    let metrics_path = dir.join(METRICS_FILE);
    let appending = resume.is_some() && metrics_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(appending)
        .write(true)
        .truncate(!appending)
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    if !appending {
        writeln!(metrics, "{}", ssn_core::trainer::StepMetrics::csv_header(trainer.model.graph.esps.len()))?;
    }
    let snapshots = dir.join("offsets");
    if cfg.output.offset_snapshots {
        create_dir(&snapshots)?;
    }
    let ipe = trainer.config.iterations_per_epoch(data.len());
    log::info!(
        "training {} iterations on {} samples ({ipe} iterations per epoch), output in {}",
        trainer.config.iterations,
        data.len(),
        dir.display()
    );

    let mut last_loss = f64::NAN;
    let result = trainer.run(&data, |m, t| {
        writeln!(metrics, "{}", m.csv_row())?;
        last_loss = m.loss_total();
        if m.inserted_fsms {
            log::info!("FSMs inserted at iteration {}", m.iteration);
        }
        if (m.iteration + 1) % ipe == 0 {
            log::debug!("epoch {} done, loss {:.6}", m.epoch, m.loss_main);
            if cfg.output.offset_snapshots {
                if let Some(csv) = offsets_snapshot(&t.model).map_err(|e| ssn_core::Error::Argument(e.line()))? {
                    fs::write(snapshots.join(format!("epoch_{:04}.csv", m.epoch)), csv)?;
                }
            }
        }
        Ok(())
    });
    metrics.flush()?;
    result?;

    let final_eval_loss = evaluate_loss(&trainer.model, &eval_set, trainer.config.batch_size)?;
    let mut ck = Checkpoint::from_trainer(&trainer);
    ck.meta.eval = Some(eval_spec);
    ck.save(&dir.join(CHECKPOINT_FILE))?;
    let summary = json!({
        "iterations": trainer.iteration,
        "final_train_loss": last_loss,
        "final_eval_loss": final_eval_loss,
        "eval_samples": eval_set.len(),
        "checkpoint": CHECKPOINT_FILE,
    });
    write_file(&dir.join(SUMMARY_FILE), &serde_json::to_string_pretty(&summary).expect("json"))?;
    log::info!("final eval loss {final_eval_loss:.9e}");
    println!("final_eval_loss={final_eval_loss:.9e}");
    Ok(())
}

fn load_with_eval(path: &Path) -> Result<(Trainer, Vec<SynthSample>), CliError> {
    let ck = Checkpoint::load(path)?;
    let spec = ck
        .meta
        .eval
        .ok_or_else(|| CliError::Run(format!("{} records no evaluation set", path.display())))?;
    let eval = spec.generate()?;
    Ok((ck.into_trainer()?, eval))
}

pub fn eval(checkpoint: &Path) -> Result<(), CliError> {
    let (trainer, eval) = load_with_eval(checkpoint)?;
    let loss = evaluate_loss(&trainer.model, &eval, trainer.config.batch_size)?;
    println!("eval_loss={loss:.9e}");
    Ok(())
}

pub fn synth(config: &Path, out: Option<&Path>, eval_split: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let dir = output_dir(out, Some(&cfg.output.dir));
    create_dir(&dir)?;
    let (name, spec) = if eval_split {
        ("eval", cfg.data.eval_spec())
    } else {
        ("train", cfg.data.train_spec())
    };
    let path = dir.join(format!("{name}.jsonl"));
    let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    let mut w = BufWriter::new(file);
    let samples = spec.generate()?;
    let dims = |t: &Tensor4<f32>| {
        let s = t.shape();
        [s.batch, s.channels, s.height, s.width]
    };
    for (i, s) in samples.iter().enumerate() {
        let row = json!({
            "index": i,
            "keypoints": s.keypoints,
            "distractors": s.distractors,
            "image_shape": dims(&s.image),
            "image": s.image.data(),
            "target_shape": dims(&s.target),
            "target": s.target.data(),
        });
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

pub fn gradcheck(cases: usize, seed: u64) -> Result<(), CliError> {
    let results = gradient_suite(cases, seed)?;
    let mut all_pass = true;
    let mut overall: f64 = 0.0;
    for kind in CheckKind::ALL {
        let of_kind: Vec<_> = results.iter().filter(|c| c.kind == kind).collect();
        if of_kind.is_empty() {
            continue;
        }
        let worst = of_kind.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
        let skipped: usize = of_kind.iter().map(|c| c.report.skipped_kinks).sum();
        let pass = of_kind.iter().all(|c| c.report.pass);
        for c in of_kind.iter().filter(|c| !c.report.pass) {
            log::warn!("case {} ({}) failed: {:?}", c.index, kind.name(), c.report);
        }
        all_pass &= pass;
        overall = overall.max(worst);
        println!(
            "gradcheck op={} cases={} max_rel_error={worst:.3e} skipped_kinks={skipped} pass={pass}",
            kind.name(),
            of_kind.len()
        );
    }
    println!("gradcheck cases={} max_rel_error={overall:.3e} pass={all_pass}", results.len());
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Run("gradient check failed".into()))
    }
}

pub fn count(a: &CountArgs) -> Result<(), CliError> {
    let graph = match a.model {
        CountModel::ThreeBlock => build_3block3fsm(a.height, a.width, a.shift_channels, a.keypoints, CaVariant::SoftplusNormalized),
        CountModel::Resnet50 => build_resnet50_fsm(a.height, a.width, a.shift_channels, a.keypoints, CaVariant::SoftplusNormalized),
    }
    .map_err(|e| CliError::Config {
        path: "count".into(),
        message: e.to_string(),
    })?;
    let cv = match a.convention {
        Convention::Mac => FlopConvention::Mac,
        Convention::TwoOpMac => FlopConvention::TwoOpMac,
    };
    if a.per_layer {
        println!("layer,params,flops");
        for c in layer_costs(&graph, cv)? {
            println!("{},{},{}", c.id, c.params, c.flops);
        }
    }
    let params = count_params(&graph)?;
    let flops = count_flops(&graph, cv)?;
    println!(
        "params={params} ({:.3} M) flops={flops} ({:.3} G) convention={}",
        params as f64 / 1e6,
        flops as f64 / 1e9,
        match cv {
            FlopConvention::Mac => "mac",
            FlopConvention::TwoOpMac => "two_op_mac",
        }
    );
    Ok(())
}

pub fn oracle_check(configs: usize, seed: u64) -> Result<(), CliError> {
    let cases = oracle_suite(configs, seed)?;
    let worst = cases.iter().map(|c| c.max_rel_diff).fold(0.0, f64::max);
    let pass = worst < ORACLE_TOLERANCE;
    for c in &cases {
        log::debug!("{c:?}");
    }
    println!("oracle-check configs={} max_rel_diff={worst:.3e} tolerance={ORACLE_TOLERANCE:e} pass={pass}", cases.len());
    if pass {
        Ok(())
    } else {
        Err(CliError::Run(format!("oracle mismatch {worst:e}")))
    }
}

struct AnalysisInputs {
    model: Model<f32>,
    eval: Vec<SynthSample>,
    opts: AnalysisConfig,
    dir: PathBuf,
}

fn analysis_inputs(a: &AnalyzeArgs) -> Result<AnalysisInputs, CliError> {
    let mut opts = match &a.config {
        Some(p) => RunConfig::load(p)?.analysis,
        None => AnalysisConfig::default(),
    };
    if let Some(m) = &a.module {
        opts.module = m.clone();
    }
    if let Some(c) = a.channel {
        opts.channel = c;
    }
    if let Some(x) = a.x {
        opts.position[0] = x;
    }
    if let Some(y) = a.y {
        opts.position[1] = y;
    }
    if let Some(t) = a.threshold {
        opts.threshold = t;
    }
    if let Some(n) = a.samples {
        opts.samples = n;
    }
    if let Some(n) = &a.normalization {
        opts.normalization = match n.as_str() {
            "max" => ScoreNorm::Max,
            "sum" => ScoreNorm::Sum,
            other => {
                return Err(CliError::Config {
                    path: "analysis.normalization".into(),
                    message: format!("unknown normalization `{other}`, expected max or sum"),
                })
            }
        };
    }
    if a.signed {
        opts.magnitude = false;
    }
    if opts.samples == 0 {
        return Err(CliError::Config {
            path: "analysis.samples".into(),
            message: "must be positive".into(),
        });
    }
    let (trainer, eval) = load_with_eval(&a.checkpoint)?;
    let dir = output_dir(a.out.as_deref(), None);
    create_dir(&dir)?;
    Ok(AnalysisInputs {
        model: trainer.model,
        eval,
        opts,
        dir,
    })
}

fn batch(eval: &[SynthSample], n: usize) -> Result<Tensor4<f32>, CliError> {
    let images: Vec<_> = eval.iter().take(n).map(|s| s.image.clone()).collect();
    Ok(Tensor4::stack(&images)?)
}

pub fn analyze(what: Analyze) -> Result<(), CliError> {
    match what {
        Analyze::Offsets(a) => {
            let inp = analysis_inputs(&a)?;
            let path = inp.dir.join("offsets.csv");
            write_file(&path, &write_offset_csv(&export_offsets(&inp.model)?))?;
            println!("wrote {}", path.display());
            let m = &inp.opts.module;
            if inp.model.is_fsm_active(m) {
                let [x, y] = inp.opts.position;
                let rows = window_energies(&inp.model, &batch(&inp.eval, 1)?, m, inp.opts.channel, (x, y))?;
                let path = inp.dir.join(format!("energies_{m}.csv"));
                write_file(&path, &energy_csv(&rows))?;
                println!("wrote {}", path.display());
            } else {
                log::warn!("`{m}` is not an active FSM; skipping window energies");
            }
        }
        Analyze::Erf(a) => {
            let inp = analysis_inputs(&a)?;
            let [x, y] = inp.opts.position;
            let m = &inp.opts.module;
            let map = erf_map(&inp.model, &batch(&inp.eval, 1)?, m, inp.opts.channel, (x, y))?;
            let path = inp.dir.join(format!("erf_{m}_c{}_x{x}_y{y}.csv", inp.opts.channel));
            write_file(&path, &map.to_csv())?;
            let (px, py) = map.peak();
            println!("erf peak=({px},{py}) wrote {}", path.display());
        }
        Analyze::KpScores(a) => {
            let inp = analysis_inputs(&a)?;
            let m = &inp.opts.module;
            let opts = ScoreOptions {
                normalization: inp.opts.normalization,
                magnitude: inp.opts.magnitude,
            };
            let scores = keypoint_offset_scores(&inp.model, &batch(&inp.eval, inp.opts.samples)?, m, opts)?;
            let path = inp.dir.join(format!("kp_scores_{m}.csv"));
            write_file(&path, &scores.to_csv())?;
            let counts = contribution_counts(&scores, inp.opts.threshold);
            let mut text = String::from("module_id,keypoint,threshold,count\n");
            for (k, c) in counts.iter().enumerate() {
                text.push_str(&format!("{m},{k},{},{c}\n", inp.opts.threshold));
            }
            write_file(&inp.dir.join(format!("kp_counts_{m}.csv")), &text)?;
            println!("kp-scores counts={counts:?} wrote {}", path.display());
        }
    }
    Ok(())
}
