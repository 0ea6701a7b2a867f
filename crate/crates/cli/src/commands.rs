use pid_lrsc::eval::{self, AblationOptions};
use pid_lrsc::io;
use pid_lrsc::model::{self, Context, GradCheckOptions, ModelParams, Variant};
use pid_lrsc::synth::{self, Bag, SynthConfig};
use pid_lrsc::{PrototypeSet, Semantic};
use serde::Serialize;

use crate::config::{Resolved, RunConfig};
use crate::CliError;

/// Everything a command needs, resolved once in `main`.
pub struct Env {
    pub config: RunConfig,
    pub paths: Resolved,
    pub quiet: bool,
}

impl Env {
    fn say(&self, text: &str) {
        if !self.quiet {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
        }
    }

    fn load_data(&self) -> Result<(Vec<Bag>, PrototypeSet), CliError> {
        let bags = io::read_bags(&self.paths.dataset)?;
        if bags.is_empty() {
            return Err(CliError::Lib(pid_lrsc::Error::EmptySet("manifest lists no bags".into())));
        }
        let protos = io::read_prototypes(&self.paths.prototypes)?;
        Ok((bags, protos))
    }

    /// `(train, test)`; with `train_fraction = 1` both are the full set.
    fn split(&self, bags: &[Bag]) -> Result<(Vec<Bag>, Vec<Bag>), CliError> {
        if self.config.train_fraction >= 1.0 {
            return Ok((bags.to_vec(), bags.to_vec()));
        }
        Ok(eval::split(bags, self.config.train_fraction, self.config.train.seed)?)
    }

    fn load_checkpoint(&self, n_in: usize) -> Result<ModelParams, CliError> {
        let params = io::read_checkpoint(&self.paths.checkpoint)?;
        if params.n_in() != n_in {
            return Err(CliError::Lib(pid_lrsc::Error::CheckpointMismatch(format!(
                "checkpoint expects {} input features, data has {n_in}",
                params.n_in()
            ))));
        }
        if params.classes() != self.config.train.classes {
            return Err(CliError::Lib(pid_lrsc::Error::CheckpointMismatch(format!(
                "checkpoint has {} classes, config has {}",
                params.classes(),
                self.config.train.classes
            ))));
        }
        Ok(params)
    }
}

pub fn gen(env: &Env) -> Result<(), CliError> {
    let bags = synth::generate_dataset(&env.config.synth, env.config.count)?;
    let protos = synth::sample_prototypes(&env.config.synth)?;
    io::write_dataset(&env.paths.dataset, &bags, &protos)?;
    env.say(&format!("wrote {} bags to {}", bags.len(), env.paths.dataset.display()));
    Ok(())
}

#[derive(Serialize)]
struct MetricsLine {
    epoch: usize,
    loss: f64,
    cross_entropy: f64,
    train_acc: f64,
}

pub fn train(env: &Env) -> Result<(), CliError> {
    let (bags, protos) = env.load_data()?;
    let (train_bags, _) = env.split(&bags)?;
    let metrics_path = env.paths.output.join("metrics.jsonl");
    match model::train(&train_bags, &protos, &env.config.train) {
        Ok(outcome) => {
            io::write_checkpoint(&env.paths.checkpoint, &outcome.params)?;
            io::write_jsonl(
                &metrics_path,
                outcome.history.iter().map(|h| MetricsLine {
                    epoch: h.epoch,
                    loss: h.loss,
                    cross_entropy: h.cross_entropy,
                    train_acc: h.train_acc,
                }),
            )?;
            if let Some(last) = outcome.history.last() {
                env.say(&format!(
                    "trained {} epochs on {} bags: loss {:.5}, train acc {:.4}",
                    outcome.history.len(),
                    train_bags.len(),
                    last.loss,
                    last.train_acc
                ));
            }
            env.say(&format!("checkpoint: {}", env.paths.checkpoint.display()));
            Ok(())
        }
        Err(pid_lrsc::Error::Divergence {
            epoch,
            bag_id,
            loss,
            last_good,
        }) => {
            let rescue = env.paths.output.join("last_good.pidm");
            io::write_checkpoint(&rescue, &last_good)?;
            Err(CliError::Lib(pid_lrsc::Error::Divergence {
                epoch,
                bag_id,
                loss,
                last_good,
            }))
        }
        Err(e) => Err(e.into()),
    }
}

/// Which bags `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

pub fn evaluate(env: &Env, which: SplitChoice) -> Result<(), CliError> {
    let (bags, protos) = env.load_data()?;
    let params = env.load_checkpoint(bags[0].features.cols())?;
    let (train_bags, test_bags) = env.split(&bags)?;
    let chosen = match which {
        SplitChoice::Train => train_bags,
        SplitChoice::Test => test_bags,
        SplitChoice::All => bags,
    };
    let tag = env.config.train.variant.as_str();
    let (report, preds) = eval::evaluate(&params, &chosen, &protos, &env.config.train, tag)?;
    io::write_json(&env.paths.output.join("report.json"), &report)?;
    io::write_projections_csv(
        &env.paths.output.join("projections.csv"),
        &preds.bag_ids,
        &preds.labels,
        &preds.predicted,
        &preds.projections,
    )?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut table = format!(
        "{:<14} {:>5} {:>8} {:>8} {:>8} {:>10} {:>8}\n",
        "variant", "bags", "acc", "auc", "eta2", "anchored", "tumor"
    );
    table.push_str(&format!(
        "{:<14} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>10} {:>8}\n",
        report.variant,
        report.bags,
        report.accuracy,
        report.macro_auc,
        report.eta_squared,
        fmt(report.disentangle.map(|d| d.anchored)),
        fmt(report.disentangle.map(|d| d.tumor_recall)),
    ));
    env.say(&table);
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct SemanticTriple {
    #[serde(rename = "TIs")]
    pub tis: f64,
    #[serde(rename = "NTIs")]
    pub ntis: f64,
    #[serde(rename = "BGIs")]
    pub bgis: f64,
}

#[derive(Debug, Serialize)]
pub struct Weights {
    #[serde(rename = "TIs")]
    pub tis: f64,
    #[serde(rename = "NTIs")]
    pub ntis: f64,
    #[serde(rename = "BGIs")]
    pub bgis: f64,
    #[serde(rename = "PIs")]
    pub pis: f64,
}

#[derive(Debug, Serialize)]
pub struct InstanceEntry {
    pub index: usize,
    pub cluster: usize,
    pub semantic: Semantic,
}

#[derive(Debug, Serialize)]
pub struct Explanation {
    pub bag_id: u64,
    pub predicted_class: usize,
    pub probs: Vec<f64>,
    pub distances: SemanticTriple,
    pub weights: Weights,
    pub instances: Vec<InstanceEntry>,
}

pub fn explain(env: &Env, bag_id: u64) -> Result<(), CliError> {
    if env.config.train.variant == Variant::NoCluster {
        return Err(CliError::config("train.variant", "no_cluster does not disentangle instances"));
    }
    let (bags, protos) = env.load_data()?;
    let bag = bags
        .iter()
        .find(|b| b.bag_id == bag_id)
        .ok_or_else(|| CliError::Lib(pid_lrsc::Error::NotFound(format!("bag {bag_id}"))))?;
    let params = env.load_checkpoint(bag.features.cols())?;
    let freqs = env.config.train.eval_frequencies(params.n_feat())?;
    let ctx = Context {
        prototypes: &protos,
        freqs: &freqs,
        config: &env.config.train,
    };
    let out = model::forward(bag, &params, &ctx)?;
    let predicted_class = out.predicted_class();
    let detail = out.detail.expect("clustering variants disentangle");
    let layout = out.layout.expect("clustering variants have a layout");
    let explanation = Explanation {
        bag_id,
        predicted_class,
        probs: out.probs,
        distances: SemanticTriple {
            tis: detail.distance_of(Semantic::Tumor),
            ntis: detail.distance_of(Semantic::NonTumor),
            bgis: detail.distance_of(Semantic::Background),
        },
        weights: Weights {
            tis: detail.weights[0],
            ntis: detail.weights[1],
            bgis: detail.weights[2],
            pis: detail.weights[3],
        },
        instances: layout
            .assignments
            .iter()
            .zip(&detail.instance_map)
            .enumerate()
            .map(|(index, (&cluster, &semantic))| InstanceEntry {
                index,
                cluster,
                semantic,
            })
            .collect(),
    };
    let path = env.paths.output.join(format!("explain_{bag_id}.json"));
    io::write_json(&path, &explanation)?;
    if !env.quiet {
        println!("{}", serde_json::to_string_pretty(&explanation).map_err(pid_lrsc::Error::from)?);
    }
    Ok(())
}

pub fn ablate(env: &Env) -> Result<(), CliError> {
    let (bags, protos) = env.load_data()?;
    let options = AblationOptions {
        seeds: env.config.ablation_seeds.clone(),
        train_fraction: if env.config.train_fraction >= 1.0 {
            AblationOptions::default().train_fraction
        } else {
            env.config.train_fraction
        },
    };
    let table = eval::run_ablation(&bags, &protos, &env.config.train, &options)?;
    io::write_jsonl(&env.paths.output.join("ablation.jsonl"), &table.rows)?;
    io::write_json(&env.paths.output.join("ablation_summary.json"), &table.medians)?;
    env.say(&table.render());
    Ok(())
}

/// Tiny self-contained problem for the gradient contract.
fn gradcheck_problem(config: &RunConfig) -> Result<(Bag, PrototypeSet), CliError> {
    let synth = SynthConfig {
        n_in: 8,
        m_min: 24,
        m_max: 36,
        prototypes: 6,
        seed: config.train.seed,
        ..config.synth.clone()
    };
    Ok((synth::generate_bag(&synth, 0)?, synth::sample_prototypes(&synth)?))
}

pub fn gradcheck(env: &Env, inject_fault: bool) -> Result<(), CliError> {
    let (bag, protos) = gradcheck_problem(&env.config)?;
    let train = pid_lrsc::TrainConfig {
        n_feat: None,
        rank: None,
        ..env.config.train.clone()
    };
    let params = ModelParams::for_config(bag.features.cols(), &train)?;
    let freqs = train.eval_frequencies(params.n_feat())?;
    let ctx = Context {
        prototypes: &protos,
        freqs: &freqs,
        config: &train,
    };
    let report = model::gradient_check(
        &bag,
        &params,
        &ctx,
        &GradCheckOptions {
            coordinates: env.config.gradcheck.coordinates,
            step: env.config.gradcheck.step,
            tolerance: env.config.gradcheck.tolerance,
            seed: train.seed,
            corrupt: inject_fault,
        },
    )?;
    io::write_json(&env.paths.output.join("gradcheck.json"), &report)?;
    let mut text = format!(
        "{:<18} {:>8} {:>14} {:>14} {:>10}\n",
        "block", "index", "analytic", "numeric", "rel.err"
    );
    for e in &report.worst_per_block {
        text.push_str(&format!(
            "{:<18} {:>8} {:>14.6e} {:>14.6e} {:>10.2e}\n",
            e.block, e.report.index, e.report.analytic, e.report.numeric, e.report.relative_error
        ));
    }
    text.push_str(&format!(
        "{} coordinates, max relative error {:.3e} (tolerance {:.0e}): {}\n",
        report.entries.len(),
        report.max_relative_error,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    ));
    env.say(&text);
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Contract(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            report.max_relative_error, report.tolerance
        )))
    }
}
