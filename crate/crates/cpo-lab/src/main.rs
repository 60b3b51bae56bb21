//! Command-line surface for the training laboratory.
//!
//! Every subcommand reads JSON configs whose field names match the library
//! types exactly, derives all randomness from `--seed`, and writes artifacts
//! under `--out`. Exit codes: 0 success, 1 validation error (bad flags,
//! configs, or data files), 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use cpo_lab::corpus::{load_corpus, load_groups, save_corpus, save_groups};
use cpo_lab::ebm::{
    enumerate_continuations, optimal_policy, partition_function, perturb_policy,
    rlhf_objective_value,
};
use cpo_lab::error::{Error, Result};
use cpo_lab::eval::{
    interpolate_parameters, length_norm_nll, reverse_kl_surrogate, win_rate_oracle, write_metrics,
    EnsembleSpec, EvalOptions, EvalSets, Evaluator, MetricsRecord,
};
use cpo_lab::gradcheck::finite_difference_suite;
use cpo_lab::markov::{MarkovGenerator, MarkovSpec};
use cpo_lab::model::{
    init_parameters, load_checkpoint, save_checkpoint, ModelConfig, Parameters,
};
use cpo_lab::negatives::NegativeSamplerConfig;
use cpo_lab::policy::TransformerPolicy;
use cpo_lab::ranking::rank_group;
use cpo_lab::seeding::{derive_seed, Stream};
use cpo_lab::tokens::TokenSequence;
use cpo_lab::train::{
    build_an_pools, build_heldout_groups, run_experiment, train, ExperimentSpec, Objective,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "cpo-lab", version, about = "Contrastive preference optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file (shape depends on the subcommand).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for all derived randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic corpus from the Markov generator.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Number of (prefix, continuation) pairs.
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Train a model from scratch (or continue from --init) with MLE.
    TrainMle {
        #[command(flatten)]
        common: Common,
        /// Corpus file.
        #[arg(long)]
        corpus: PathBuf,
        /// Optional checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fine-tune a reference checkpoint with a preference objective.
    TrainCpo {
        #[command(flatten)]
        common: Common,
        /// Corpus file.
        #[arg(long)]
        corpus: PathBuf,
        /// Frozen reference checkpoint (also the initialization).
        #[arg(long)]
        ref_ckpt: PathBuf,
    },
    /// Assemble preference groups (ground truth + synthetic negatives).
    GenNegatives {
        #[command(flatten)]
        common: Common,
        /// Corpus file supplying anchors and batch negatives.
        #[arg(long)]
        corpus: PathBuf,
        /// Reference checkpoint used by the samplers.
        #[arg(long)]
        ref_ckpt: PathBuf,
        /// How many groups to assemble (default: every corpus pair).
        #[arg(long)]
        n_groups: Option<usize>,
    },
    /// Attach embedding-similarity rankings to a group file.
    Rank {
        #[command(flatten)]
        common: Common,
        /// Group file to rank.
        #[arg(long)]
        groups: PathBuf,
        /// Reference checkpoint providing the embeddings.
        #[arg(long)]
        ref_ckpt: PathBuf,
    },
    /// Interpolate two checkpoints at the given alphas.
    Ensemble {
        #[command(flatten)]
        common: Common,
        /// Checkpoint treated as the alpha = 1 endpoint (MLE side).
        #[arg(long)]
        ckpt_a: PathBuf,
        /// Checkpoint treated as the alpha = 0 endpoint (CPO side).
        #[arg(long)]
        ckpt_b: PathBuf,
        /// Comma-separated interpolation weights in [0, 1].
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
    },
    /// Score a checkpoint against the exact synthetic oracle.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Reference checkpoint (implicit rewards need one).
        #[arg(long)]
        ref_ckpt: PathBuf,
        /// Corpus file of held-out (prefix, ground truth) pairs.
        #[arg(long)]
        corpus: PathBuf,
        /// Optional group file for gt_top1_rate.
        #[arg(long)]
        groups: Option<PathBuf>,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random coordinates per objective.
        #[arg(long, default_value_t = 100)]
        coords: usize,
    },
    /// Check the closed-form RLHF optimum on an enumerated toy space.
    EbmCheck {
        #[command(flatten)]
        common: Common,
        /// Number of Dirichlet perturbations to test against.
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Run the full desk-scale experiment recipe.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Use the built-in desk-scale spec instead of --config.
        #[arg(long)]
        desk: bool,
    },
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Optional config file with a fallback default.
fn read_config_or<T: for<'de> Deserialize<'de>>(common: &Common, default: T) -> Result<T> {
    match &common.config {
        Some(path) => read_json(path),
        None => Ok(default),
    }
}

#[derive(Deserialize)]
struct GenCorpusFile {
    markov: MarkovSpec,
}

#[derive(Deserialize)]
struct TrainMleFile {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Deserialize)]
struct TrainCpoFile {
    train: TrainConfig,
}

#[derive(Deserialize)]
struct GenNegativesFile {
    sampler: NegativeSamplerConfig,
}

#[derive(Deserialize)]
struct EvalFile {
    markov: MarkovSpec,
    eval: EvalOptions,
}

fn ensure_out(common: &Common) -> Result<()> {
    std::fs::create_dir_all(&common.out)?;
    Ok(())
}

fn load_matching_checkpoint(path: &Path, expect: &ModelConfig) -> Result<Parameters> {
    let (config, params) = load_checkpoint(path)?;
    if &config != expect {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: "model shape differs from the other inputs".into(),
        });
    }
    Ok(params)
}

fn cmd_gen_corpus(common: &Common, n: usize) -> Result<()> {
    let file = read_config_or(
        common,
        GenCorpusFile {
            markov: MarkovSpec {
                seed: common.seed,
                ..MarkovSpec::default()
            },
        },
    )?;
    ensure_out(common)?;
    let gen = MarkovGenerator::new(file.markov)?;
    let pairs = gen.sample_pairs(n, common.seed)?;
    let path = common.out.join("corpus.txt");
    save_corpus(&path, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), path.display());
    Ok(())
}

fn cmd_train_mle(common: &Common, corpus_path: &Path, init: Option<&Path>) -> Result<()> {
    let path = common.config.as_ref().ok_or_else(|| {
        Error::InvalidConfig("train-mle needs --config with {\"model\", \"train\"}".into())
    })?;
    let file: TrainMleFile = read_json(path)?;
    if file.train.objective != Objective::Mle {
        return Err(Error::InvalidConfig(
            "train-mle runs the MLE objective; use train-cpo for preference objectives".into(),
        ));
    }
    ensure_out(common)?;
    let corpus = load_corpus(corpus_path, file.model.vocab_size)?;
    let init_params = match init {
        Some(p) => load_matching_checkpoint(p, &file.model)?,
        None => init_parameters(&file.model, derive_seed(common.seed, Stream::Init, 0))?,
    };
    let out = train(
        &file.model,
        &file.train,
        &corpus,
        &init_params,
        None,
        None,
        None,
        0,
    )?;
    let ckpt = common.out.join("mle.ckpt");
    save_checkpoint(&ckpt, &file.model, &out.params)?;
    println!(
        "loss {:.6} -> {:.6}; checkpoint {}",
        out.first_loss,
        out.final_loss,
        ckpt.display()
    );
    Ok(())
}

fn cmd_train_cpo(common: &Common, corpus_path: &Path, ref_path: &Path) -> Result<()> {
    let path = common.config.as_ref().ok_or_else(|| {
        Error::InvalidConfig("train-cpo needs --config with {\"train\"}".into())
    })?;
    let file: TrainCpoFile = read_json(path)?;
    if !file.train.objective.needs_reference() {
        return Err(Error::InvalidConfig(
            "train-cpo runs preference objectives; use train-mle for MLE".into(),
        ));
    }
    ensure_out(common)?;
    let (model, ref_params) = load_checkpoint(ref_path)?;
    let corpus = load_corpus(corpus_path, model.vocab_size)?;
    let pools = if file.train.sampler.mix.n_an > 0 {
        Some(build_an_pools(
            &ref_params,
            &model,
            &corpus,
            &file.train.sampler,
            derive_seed(common.seed, Stream::Autoregressive, 0),
        )?)
    } else {
        None
    };
    let out = train(
        &model,
        &file.train,
        &corpus,
        &ref_params,
        Some(&ref_params),
        pools.as_deref(),
        None,
        0,
    )?;
    let ckpt = common.out.join("cpo.ckpt");
    save_checkpoint(&ckpt, &model, &out.params)?;
    println!(
        "loss {:.6} -> {:.6}; checkpoint {}",
        out.first_loss,
        out.final_loss,
        ckpt.display()
    );
    Ok(())
}

fn cmd_gen_negatives(
    common: &Common,
    corpus_path: &Path,
    ref_path: &Path,
    n_groups: Option<usize>,
) -> Result<()> {
    let file = read_config_or(
        common,
        GenNegativesFile {
            sampler: NegativeSamplerConfig {
                seed: common.seed,
                ..NegativeSamplerConfig::default()
            },
        },
    )?;
    ensure_out(common)?;
    let (model, ref_params) = load_checkpoint(ref_path)?;
    let pairs = load_corpus(corpus_path, model.vocab_size)?;
    let n = n_groups.unwrap_or(pairs.len()).min(pairs.len());
    if n == 0 {
        return Err(Error::InvalidConfig("no pairs to assemble groups from".into()));
    }
    let pools = if file.sampler.mix.n_an > 0 {
        Some(build_an_pools(
            &ref_params,
            &model,
            &pairs[..n],
            &file.sampler,
            derive_seed(common.seed, Stream::Autoregressive, 0),
        )?)
    } else {
        None
    };
    let groups = build_heldout_groups(
        &ref_params,
        &model,
        &pairs[..n],
        &file.sampler,
        pools.as_deref(),
        common.seed,
    )?;
    let path = common.out.join("groups.txt");
    save_groups(&path, &groups)?;
    println!("wrote {} groups to {}", groups.len(), path.display());
    Ok(())
}

fn cmd_rank(common: &Common, groups_path: &Path, ref_path: &Path) -> Result<()> {
    ensure_out(common)?;
    let (model, ref_params) = load_checkpoint(ref_path)?;
    let mut groups = load_groups(groups_path, model.vocab_size)?;
    for group in &mut groups {
        rank_group(&ref_params, &model, group)?;
    }
    let path = common.out.join("groups_ranked.txt");
    save_groups(&path, &groups)?;
    println!("wrote {} ranked groups to {}", groups.len(), path.display());
    Ok(())
}

fn cmd_ensemble(common: &Common, a: &Path, b: &Path, alphas: &[f64]) -> Result<()> {
    ensure_out(common)?;
    let (config_a, params_a) = load_checkpoint(a)?;
    let params_b = load_matching_checkpoint(b, &config_a)?;
    for &alpha in alphas {
        let blended = interpolate_parameters(&EnsembleSpec {
            alpha,
            theta_mle: &params_a,
            theta_cpo: &params_b,
        })?;
        let path = common.out.join(format!("ensemble_alpha_{alpha:.2}.ckpt"));
        save_checkpoint(&path, &config_a, &blended)?;
        println!("alpha {alpha:.2} -> {}", path.display());
    }
    Ok(())
}

fn cmd_eval(
    common: &Common,
    ckpt: &Path,
    ref_path: &Path,
    corpus_path: &Path,
    groups_path: Option<&Path>,
) -> Result<()> {
    let path = common.config.as_ref().ok_or_else(|| {
        Error::InvalidConfig("eval needs --config with {\"markov\", \"eval\"}".into())
    })?;
    let file: EvalFile = read_json(path)?;
    ensure_out(common)?;
    let (model, params) = load_checkpoint(ckpt)?;
    let ref_params = load_matching_checkpoint(ref_path, &model)?;
    if file.markov.vocab_size != model.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "oracle vocabulary {} does not match the model's {}",
            file.markov.vocab_size, model.vocab_size
        )));
    }
    let oracle = MarkovGenerator::new(file.markov)?;
    let pairs = load_corpus(corpus_path, model.vocab_size)?;
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation corpus".into()));
    }

    let record = match groups_path {
        Some(gp) => {
            let groups = load_groups(gp, model.vocab_size)?;
            let kl_prefixes: Vec<TokenSequence> =
                pairs.iter().map(|(p, _)| p.clone()).collect();
            let sets = EvalSets {
                heldout_groups: &groups,
                kl_prefixes: &kl_prefixes,
                winrate_pairs: &pairs,
            };
            let evaluator = Evaluator::new(&oracle, &model, &ref_params, sets, file.eval)?;
            evaluator.evaluate(&params, 0, 0.0)?
        }
        None => {
            // Without groups, gt_top1_rate has no candidates; report the
            // other metrics and leave it 0.
            let policy = TransformerPolicy::new(&params, &model, file.eval.sample_topk);
            let kl_prefixes: Vec<TokenSequence> =
                pairs.iter().map(|(p, _)| p.clone()).collect();
            let reverse_kl = reverse_kl_surrogate(
                &policy,
                &oracle,
                &kl_prefixes,
                file.eval.samples_per_prefix,
                file.eval.max_new,
                file.eval.seed,
            )?;
            let win_rate = win_rate_oracle(
                &params,
                &model,
                &oracle,
                &pairs,
                file.eval.max_new,
                file.eval.seed,
            )?;
            let items: Vec<(TokenSequence, Vec<TokenSequence>)> = pairs
                .iter()
                .map(|(p, gt)| (p.clone(), vec![gt.clone()]))
                .collect();
            let nll = length_norm_nll(&oracle, &items)?;
            MetricsRecord {
                step: 0,
                train_loss: 0.0,
                reverse_kl,
                length_norm_nll: nll,
                gt_top1_rate: 0.0,
                win_rate,
            }
        }
    };
    let path = common.out.join("metrics_eval.jsonl");
    write_metrics(&path, std::slice::from_ref(&record))?;
    println!("{}", serde_json::to_string(&record)?);
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gradcheck(common: &Common, coords: usize) -> Result<()> {
    let reports = finite_difference_suite(common.seed, coords, 1e-5)?;
    let mut failed = false;
    for r in &reports {
        let ok = r.max_rel_err < 1e-4;
        failed |= !ok;
        println!(
            "{}: {} coords, max rel err {:.3e} at coordinate {} — {}",
            r.objective,
            r.coords_checked,
            r.max_rel_err,
            r.worst_coord,
            if ok { "OK" } else { "MISMATCH" }
        );
    }
    if failed {
        return Err(Error::InvalidConfig(
            "analytic gradients disagree with finite differences".into(),
        ));
    }
    Ok(())
}

fn cmd_ebm_check(common: &Common, n: usize) -> Result<()> {
    // Small enumerable instance: random reference policy over continuations
    // of length <= 3 from a 5-token vocabulary, random rewards, beta = 2.
    let config = ModelConfig {
        vocab_size: 5,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_context: 8,
    };
    let params = init_parameters(&config, common.seed)?;
    let prefix = TokenSequence::new(vec![1])?;
    let reference = enumerate_continuations(&params, &config, &prefix, 3)?;
    let beta = 2.0;
    use rand::Rng;
    let mut rng = cpo_lab::seeding::stream_rng(common.seed, Stream::Perturb, 99);
    let rewards: Vec<f64> = (0..reference.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let z = partition_function(&reference, &rewards, beta)?;
    let star = optimal_policy(&reference, &rewards, beta)?;
    let star_value = rlhf_objective_value(&star, &reference, &rewards, beta)?;
    let target = beta * z.ln();
    println!(
        "optimal objective {:.12} vs beta log Z {:.12} (|diff| {:.3e})",
        star_value,
        target,
        (star_value - target).abs()
    );
    if (star_value - target).abs() > 1e-9 {
        return Err(Error::InvalidConfig(
            "closed-form optimum does not attain beta log Z".into(),
        ));
    }
    let mut worst = f64::NEG_INFINITY;
    for i in 0..n {
        let perturbed = perturb_policy(&star, 300.0, derive_seed(common.seed, Stream::Perturb, i as u64))?;
        let value = rlhf_objective_value(&perturbed, &reference, &rewards, beta)?;
        if value > star_value + 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "perturbation {i} beats the closed-form optimum: {value} > {star_value}"
            )));
        }
        worst = worst.max(value);
    }
    println!("{n} perturbations stayed below the optimum (best challenger {worst:.12})");
    Ok(())
}

fn cmd_experiment(common: &Common, desk: bool) -> Result<()> {
    let spec = if desk {
        ExperimentSpec::desk(common.seed)
    } else {
        let path = common.config.as_ref().ok_or_else(|| {
            Error::InvalidConfig("experiment needs --config or --desk".into())
        })?;
        read_json::<ExperimentSpec>(path)?
    };
    let out = run_experiment(&spec, &common.out)?;
    println!(
        "baseline: gt_top1 {:.3} win {:.3} kl {:.5}",
        out.baseline_final.gt_top1_rate, out.baseline_final.win_rate, out.baseline_final.reverse_kl
    );
    println!(
        "cpo:      gt_top1 {:.3} win {:.3} kl {:.5}",
        out.cpo_final.gt_top1_rate, out.cpo_final.win_rate, out.cpo_final.reverse_kl
    );
    for (alpha, rec) in &out.sweep_finals {
        println!(
            "alpha {alpha:.2}: gt_top1 {:.3} win {:.3} kl {:.5}",
            rec.gt_top1_rate, rec.win_rate, rec.reverse_kl
        );
    }
    println!("artifacts in {}", common.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus { common, n } => cmd_gen_corpus(common, *n),
        Command::TrainMle {
            common,
            corpus,
            init,
        } => cmd_train_mle(common, corpus, init.as_deref()),
        Command::TrainCpo {
            common,
            corpus,
            ref_ckpt,
        } => cmd_train_cpo(common, corpus, ref_ckpt),
        Command::GenNegatives {
            common,
            corpus,
            ref_ckpt,
            n_groups,
        } => cmd_gen_negatives(common, corpus, ref_ckpt, *n_groups),
        Command::Rank {
            common,
            groups,
            ref_ckpt,
        } => cmd_rank(common, groups, ref_ckpt),
        Command::Ensemble {
            common,
            ckpt_a,
            ckpt_b,
            alphas,
        } => cmd_ensemble(common, ckpt_a, ckpt_b, alphas),
        Command::Eval {
            common,
            ckpt,
            ref_ckpt,
            corpus,
            groups,
        } => cmd_eval(common, ckpt, ref_ckpt, corpus, groups.as_deref()),
        Command::Gradcheck { common, coords } => cmd_gradcheck(common, *coords),
        Command::EbmCheck { common, n } => cmd_ebm_check(common, *n),
        Command::Experiment { common, desk } => cmd_experiment(common, *desk),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
