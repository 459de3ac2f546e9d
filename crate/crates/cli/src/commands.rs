use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ledmerge::analysis::{
    grid_report_with_failures, layerwise_jaccard_with, GridFailure, GridResult, LayerTagger, DEFAULT_ATTENTION_PATTERN,
    DEFAULT_JACCARD_RATIO, DEFAULT_MLP_PATTERN,
};
use ledmerge::baselines::{run_baseline, BaselineConfig, BaselineMethod};
use ledmerge::checkpoint::Checkpoint;
use ledmerge::led::{led_merge, led_merge_to_file, ElectionMode, Granularity, MergeConfig, TaskSpec};
use ledmerge::scoring::{
    import_scores, magnitude_scores, random_scores, snip_scores_capped, wanda_scores, ImportanceMap, ScoreMethod,
};
use ledmerge::toygrad::{eval_accuracy, train_toy, ConflictScenario, LocationDataset, ScenarioConfig, ToyModel};
use rayon::prelude::*;

use crate::cli::{AnalyzeArgs, EvalArgs, GridArgs, MergeArgs, ScenarioArgs, ScoreArgs, TrainArgs};
use crate::config::{check_paths, pick, pick_list, require, RunConfig};
use crate::error::{usage, CliError, CliResult};

pub const MERGED_FILE: &str = "merged.safetensors";
pub const REPORT_FILE: &str = "report.json";
pub const JACCARD_FILE: &str = "jaccard.json";
pub const GRID_FILE: &str = "grid.json";
pub const EVAL_FILE: &str = "eval.json";
pub const MODEL_FILE: &str = "model.safetensors";
pub const THREADS_VAR: &str = "LEDMERGE_THREADS";

/// Settings shared by every subcommand.
pub struct Context {
    pub file: RunConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Context {
    fn out(&self, name: &str) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.out_dir).map_err(|e| usage(format!("cannot create {}: {e}", self.out_dir.display())))?;
        Ok(self.out_dir.join(name))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| {
        CliError::Library(ledmerge::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn parse_method(s: &str) -> CliResult<ScoreMethod> {
    Ok(s.parse::<ScoreMethod>()?)
}

fn parse_granularity(s: &str) -> CliResult<Granularity> {
    match s {
        "per_tensor" => Ok(Granularity::PerTensor),
        "global" => Ok(Granularity::Global),
        other => Err(usage(format!("unknown granularity `{other}`"))),
    }
}

fn load_model(path: &Path) -> CliResult<ToyModel> {
    Ok(ToyModel::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn load_datasets(paths: &[PathBuf]) -> CliResult<Vec<LocationDataset>> {
    paths.iter().map(|p| Ok(LocationDataset::load_jsonl(p)?)).collect()
}

/// Scores a toy model with any non-imported method.
pub fn score_model(
    method: ScoreMethod,
    model: &ToyModel,
    data: Option<&LocationDataset>,
    max_examples: Option<usize>,
    seed: u64,
) -> CliResult<ImportanceMap> {
    let need = || data.ok_or_else(|| usage(format!("{method} scoring needs a dataset")));
    Ok(match method {
        ScoreMethod::Snip => snip_scores_capped(model, need()?, max_examples)?,
        ScoreMethod::Wanda => {
            let d = need()?;
            wanda_scores(model, &d.truncated(max_examples.unwrap_or(d.len())))?
        }
        ScoreMethod::Magnitude => magnitude_scores(&model.to_checkpoint())?,
        ScoreMethod::Random => random_scores(&model.to_checkpoint(), seed)?,
        ScoreMethod::Imported => return Err(usage("`imported` is not a scoring method; pass score files instead")),
    })
}

pub fn score(ctx: &Context, args: ScoreArgs) -> CliResult<()> {
    let f = &ctx.file.score;
    let model = require(pick(args.model, f.model.clone()), "score.model")?;
    let base = pick(args.base, f.base.clone());
    let datasets = pick_list(args.datasets, f.datasets.clone());
    check_paths(std::iter::once(&model).chain(base.iter()).chain(&datasets))?;
    let method = match args.method {
        Some(m) => parse_method(&m)?,
        None => f.method.unwrap_or(ScoreMethod::Snip),
    };
    let max = pick(args.max_examples, f.max_examples);
    let fine_model = load_model(&model)?;
    let base_model = base.as_deref().map(load_model).transpose()?;

    let data = load_datasets(&datasets)?;
    let mut jobs: Vec<(String, Option<&LocationDataset>)> = data.iter().map(|d| (format!("{}.", d.name()), Some(d))).collect();
    if jobs.is_empty() {
        jobs.push((String::new(), None));
    }
    for (prefix, d) in jobs {
        let path = ctx.out(&format!("{prefix}fine.scores.safetensors"))?;
        score_model(method, &fine_model, d, max, ctx.seed)?.save(&path)?;
        println!("{}", path.display());
        if let Some(b) = &base_model {
            let path = ctx.out(&format!("{prefix}base.scores.safetensors"))?;
            score_model(method, b, d, max, ctx.seed)?.save(&path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

/// Per-task values: one each, or a single value broadcast to all.
fn per_task(values: Vec<f64>, k: usize, what: &str, default: Option<f64>) -> CliResult<Vec<f64>> {
    match values.len() {
        0 => default.map(|v| vec![v; k]).ok_or_else(|| usage(format!("missing required setting `{what}`"))),
        1 => Ok(vec![values[0]; k]),
        n if n == k => Ok(values),
        n => Err(usage(format!("{n} values for `{what}` but {k} tasks"))),
    }
}

fn task_names(names: Vec<String>, datasets: &[LocationDataset], k: usize) -> CliResult<Vec<String>> {
    if !names.is_empty() {
        if names.len() != k {
            return Err(usage(format!("{} task names for {k} tasks", names.len())));
        }
        return Ok(names);
    }
    if datasets.len() == k {
        let from_data: Vec<String> = datasets.iter().map(|d| d.name().to_string()).collect();
        let mut unique = from_data.clone();
        unique.sort();
        unique.dedup();
        if unique.len() == k {
            return Ok(from_data);
        }
    }
    Ok((0..k).map(|i| format!("task{i}")).collect())
}

/// Fine and base maps of every task, each measured on that task's data.
pub fn toy_score_pairs(
    method: ScoreMethod,
    base: &ToyModel,
    fines: &[ToyModel],
    datasets: &[LocationDataset],
    seed: u64,
) -> CliResult<Vec<(ImportanceMap, ImportanceMap)>> {
    fines
        .iter()
        .zip(datasets)
        .map(|(f, d)| Ok((score_model(method, f, Some(d), None, seed)?, score_model(method, base, Some(d), None, seed)?)))
        .collect()
}

pub fn merge(ctx: &Context, args: MergeArgs) -> CliResult<()> {
    let f = &ctx.file.merge;
    let method = pick(args.method, f.method.clone()).unwrap_or_else(|| "led".into());
    let base_path = require(pick(args.base, f.base.clone()), "merge.base")?;
    let fine_paths = pick_list(args.fines, f.fines.clone());
    let fine_scores = pick_list(args.fine_scores, f.fine_scores.clone());
    let base_scores = pick_list(args.base_scores, f.base_scores.clone());
    let dataset_paths = pick_list(args.datasets, f.datasets.clone());
    check_paths(
        std::iter::once(&base_path)
            .chain(&fine_paths)
            .chain(&fine_scores)
            .chain(&base_scores)
            .chain(&dataset_paths),
    )?;
    if fine_paths.is_empty() {
        return Err(usage("at least one fine-tuned checkpoint is required"));
    }
    let base = Checkpoint::load(&base_path)?;
    let fines = fine_paths.iter().map(Checkpoint::load).collect::<Result<Vec<_>, _>>()?;
    let k = fines.len();
    let merged_path = ctx.out(MERGED_FILE)?;

    let report = if method == "led" {
        let datasets = load_datasets(&dataset_paths)?;
        let scores = if !fine_scores.is_empty() || !base_scores.is_empty() {
            if fine_scores.len() != k || base_scores.len() != k {
                return Err(usage(format!(
                    "{k} tasks need {k} fine and {k} base score files, got {} and {}",
                    fine_scores.len(),
                    base_scores.len()
                )));
            }
            fine_scores
                .iter()
                .zip(&base_scores)
                .map(|(a, b)| Ok((import_scores(a, &base)?, import_scores(b, &base)?)))
                .collect::<CliResult<Vec<_>>>()?
        } else if datasets.len() == k {
            let location = match args.location {
                Some(m) => parse_method(&m)?,
                None => f.location.unwrap_or(ScoreMethod::Snip),
            };
            let base_model = ToyModel::from_checkpoint(&base)?;
            let fine_models = fines.iter().map(ToyModel::from_checkpoint).collect::<Result<Vec<_>, _>>()?;
            toy_score_pairs(location, &base_model, &fine_models, &datasets, ctx.seed)?
        } else {
            return Err(usage(format!("led needs score files or {k} location datasets")));
        };
        let names = task_names(pick_list(args.names, f.names.clone()), &datasets, k)?;
        let ratios = per_task(pick_list(args.ratios, f.ratios.clone()), k, "ratio", None)?;
        let lambdas = per_task(pick_list(args.lambdas, f.lambdas.clone()), k, "lambda", Some(1.0))?;
        let mut config = MergeConfig::new(
            (0..k).map(|i| TaskSpec::new(names[i].clone(), ratios[i], lambdas[i])).collect(),
        );
        config.location = scores[0].0.method();
        config.seed = ctx.seed;
        if let Some(e) = args.election.as_deref().map(ElectionMode::parse).transpose()?.or(f.election) {
            config.election = e;
        }
        if let Some(g) = args.granularity.as_deref().map(parse_granularity).transpose()?.or(f.granularity) {
            config.granularity = g;
        }
        config.exclude = pick_list(args.exclude, f.exclude.clone());
        led_merge_to_file(&config, &base, &fines, &scores, &merged_path)?
    } else {
        let mut config = BaselineConfig::new(method.parse::<BaselineMethod>()?);
        if let Some(v) = pick(args.baseline_lambda, f.lambda) {
            config.lambda = v;
        }
        if let Some(v) = pick(args.trim_keep_ratio, f.trim_keep_ratio) {
            config.trim_keep_ratio = v;
        }
        if let Some(v) = pick(args.top_mask_ratio, f.top_mask_ratio) {
            config.top_mask_ratio = v;
        }
        if let Some(v) = pick(args.keep_ratio, f.keep_ratio) {
            config.keep_ratio = v;
        }
        let merged = run_baseline(&config, &base, &fines)?;
        merged.checkpoint.save(&merged_path)?;
        merged.report
    };
    write_text(&ctx.out(REPORT_FILE)?, &report.to_json())?;
    println!("{}", merged_path.display());
    Ok(())
}

pub fn analyze(ctx: &Context, args: AnalyzeArgs) -> CliResult<()> {
    let f = &ctx.file.analyze;
    let a = require(pick(args.map_a, f.map_a.clone()), "analyze.map_a")?;
    let b = require(pick(args.map_b, f.map_b.clone()), "analyze.map_b")?;
    check_paths([&a, &b])?;
    let ratio = pick(args.ratio, f.ratio).unwrap_or(DEFAULT_JACCARD_RATIO);
    let tagger = LayerTagger::new(
        &pick(args.attention_pattern, f.attention_pattern.clone()).unwrap_or_else(|| DEFAULT_ATTENTION_PATTERN.into()),
        &pick(args.mlp_pattern, f.mlp_pattern.clone()).unwrap_or_else(|| DEFAULT_MLP_PATTERN.into()),
    )?;
    let reference = Checkpoint::load(&a)?;
    let report = layerwise_jaccard_with(&import_scores(&a, &reference)?, &import_scores(&b, &reference)?, ratio, &tagger)?;
    write_text(&ctx.out(JACCARD_FILE)?, &report.to_json())?;
    write_text(&ctx.out("jaccard.csv")?, &report.to_csv()?)?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn toy_train(ctx: &Context, args: TrainArgs) -> CliResult<()> {
    let f = &ctx.file.train;
    let dataset = require(pick(args.dataset, f.dataset.clone()), "train.dataset")?;
    let base = pick(args.base, f.base.clone());
    check_paths(std::iter::once(&dataset).chain(base.iter()))?;
    let data = LocationDataset::load_jsonl(&dataset)?;
    let start = match base {
        Some(p) => load_model(&p)?,
        None => {
            let sizes = pick_list(args.sizes, f.sizes.clone());
            if sizes.is_empty() {
                return Err(usage("toy-train needs --base or --sizes"));
            }
            ToyModel::init(&sizes, ctx.seed)?
        }
    };
    let epochs = pick(args.epochs, f.epochs).unwrap_or(200);
    let lr = pick(args.lr, f.lr).unwrap_or(0.5);
    let model = train_toy(&start, &data, epochs, lr, ctx.seed)?;
    let path = ctx.out(MODEL_FILE)?;
    model.to_checkpoint().save(&path)?;
    println!("{}\ttrain accuracy {}", path.display(), eval_accuracy(&model, &data)?);
    Ok(())
}

fn accuracies(model: &ToyModel, data: &[LocationDataset]) -> CliResult<BTreeMap<String, f64>> {
    data.iter().map(|d| Ok((d.name().to_string(), eval_accuracy(model, d)?))).collect()
}

pub fn toy_eval(ctx: &Context, args: EvalArgs) -> CliResult<()> {
    let f = &ctx.file.eval;
    let model = require(pick(args.model, f.model.clone()), "eval.model")?;
    let datasets = pick_list(args.datasets, f.datasets.clone());
    check_paths(std::iter::once(&model).chain(&datasets))?;
    if datasets.is_empty() {
        return Err(usage("toy-eval needs at least one dataset"));
    }
    let acc = accuracies(&load_model(&model)?, &load_datasets(&datasets)?)?;
    let json = serde_json::to_string_pretty(&serde_json::json!({ "accuracy": acc })).expect("serializes");
    write_text(&ctx.out(EVAL_FILE)?, &json)?;
    println!("{json}");
    Ok(())
}

/// Worker count from the environment, if set.
pub fn threads() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(format!("{THREADS_VAR} must be a positive integer, got `{v}`"))),
        },
    }
}

fn parse_list(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| usage(format!("bad number `{v}` in `{s}`"))))
        .collect()
}

/// Every combination of one ratio per task and one shared lambda, in
/// lexicographic order.
fn cells(ratios: &[Vec<f64>], lambdas: &[f64]) -> Vec<(Vec<f64>, f64)> {
    let mut combos: Vec<Vec<f64>> = vec![Vec::new()];
    for options in ratios {
        combos = combos
            .into_iter()
            .flat_map(|c| options.iter().map(move |&r| [c.clone(), vec![r]].concat()))
            .collect();
    }
    combos.into_iter().flat_map(|c| lambdas.iter().map(move |&l| (c.clone(), l))).collect()
}

pub fn grid(ctx: &Context, args: GridArgs) -> CliResult<()> {
    let f = &ctx.file.grid;
    let base_path = require(pick(args.base, f.base.clone()), "grid.base")?;
    let fine_paths = pick_list(args.fines, f.fines.clone());
    let dataset_paths = pick_list(args.datasets, f.datasets.clone());
    let eval_paths = pick_list(args.evals, f.evals.clone());
    check_paths(std::iter::once(&base_path).chain(&fine_paths).chain(&dataset_paths).chain(&eval_paths))?;
    let k = fine_paths.len();
    if k == 0 || dataset_paths.len() != k {
        return Err(usage(format!("grid needs one location dataset per fine-tuned model ({k} models, {} datasets)", dataset_paths.len())));
    }
    let ratios = if args.ratios.is_empty() {
        f.ratios.clone().unwrap_or_default()
    } else {
        args.ratios.iter().map(|s| parse_list(s)).collect::<CliResult<Vec<_>>>()?
    };
    let ratios = match ratios.len() {
        1 => vec![ratios[0].clone(); k],
        n if n == k => ratios,
        n => return Err(usage(format!("{n} ratio lists for {k} tasks"))),
    };
    let lambdas = pick_list(args.lambdas, f.lambdas.clone());
    if lambdas.is_empty() || ratios.iter().any(Vec::is_empty) {
        return Err(usage("grid needs explicit non-empty ratio and lambda lists"));
    }
    let location = match args.location {
        Some(m) => parse_method(&m)?,
        None => f.location.unwrap_or(ScoreMethod::Snip),
    };
    let election = match args.election {
        Some(e) => ElectionMode::parse(&e)?,
        None => f.election.unwrap_or_default(),
    };

    let base = Checkpoint::load(&base_path)?.to_memory()?;
    let fines = fine_paths.iter().map(|p| Checkpoint::load(p)?.to_memory()).collect::<Result<Vec<_>, _>>()?;
    let location_data = load_datasets(&dataset_paths)?;
    let eval_data = if eval_paths.is_empty() { location_data.clone() } else { load_datasets(&eval_paths)? };
    let names = task_names(pick_list(args.names, f.names.clone()), &location_data, k)?;
    let base_model = ToyModel::from_checkpoint(&base)?;
    let fine_models = fines.iter().map(ToyModel::from_checkpoint).collect::<Result<Vec<_>, _>>()?;
    let scores = toy_score_pairs(location, &base_model, &fine_models, &location_data, ctx.seed)?;

    let run_cell = |(r, lambda): &(Vec<f64>, f64)| -> (BTreeMap<String, f64>, CliResult<BTreeMap<String, f64>>) {
        let mut point: BTreeMap<String, f64> = names.iter().zip(r).map(|(n, &v)| (format!("ratio_{n}"), v)).collect();
        point.insert("lambda".into(), *lambda);
        let outcome = (|| {
            let mut config =
                MergeConfig::new(names.iter().zip(r).map(|(n, &v)| TaskSpec::new(n.clone(), v, *lambda)).collect());
            config.election = election;
            config.location = location;
            config.seed = ctx.seed;
            let merged = led_merge(&config, &base, &fines, &scores)?;
            let model = ToyModel::from_checkpoint(&merged.checkpoint)?;
            names
                .iter()
                .zip(&eval_data)
                .map(|(n, d)| Ok((format!("acc_{n}"), eval_accuracy(&model, d)?)))
                .collect()
        })();
        (point, outcome)
    };
    let grid = cells(&ratios, &lambdas);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads()? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| usage(format!("thread pool: {e}")))?;
    let outcomes: Vec<_> = pool.install(|| grid.par_iter().map(run_cell).collect());

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (config, outcome) in outcomes {
        match outcome {
            Ok(metrics) => results.push(GridResult { config, metrics }),
            Err(e) => {
                log::warn!("grid point {config:?} failed: {e}");
                failures.push(GridFailure {
                    config,
                    error: e.to_string(),
                })
            }
        }
    }
    let report = grid_report_with_failures(results, failures);
    write_text(&ctx.out(GRID_FILE)?, &report.to_json())?;
    write_text(&ctx.out("grid.csv")?, &report.to_csv()?)?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn toy_scenario(ctx: &Context, args: ScenarioArgs) -> CliResult<()> {
    let f = &ctx.file.scenario;
    let mut config = ScenarioConfig::default();
    if let Some(o) = pick(args.overlap, f.overlap) {
        config.overlap = o;
    }
    let sc = ConflictScenario::generate(config, ctx.seed)?;
    sc.base.to_checkpoint().save(ctx.out("base.safetensors")?)?;
    for (name, d) in [("task_a", &sc.task_a), ("task_b", &sc.task_b), ("eval_a", &sc.eval_a), ("eval_b", &sc.eval_b)] {
        d.save_jsonl(ctx.out(&format!("{name}.jsonl"))?)?;
    }
    if args.train || f.train.unwrap_or(false) {
        let (a, b) = sc.specialists(ctx.seed)?;
        a.to_checkpoint().save(ctx.out("fine_a.safetensors")?)?;
        b.to_checkpoint().save(ctx.out("fine_b.safetensors")?)?;
    }
    println!("{}", ctx.out_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cells_cover_the_product_in_order() {
        let c = cells(&[vec![0.1, 0.3], vec![0.5]], &[0.5, 1.0]);
        assert_eq!(
            c,
            [
                (vec![0.1, 0.5], 0.5),
                (vec![0.1, 0.5], 1.0),
                (vec![0.3, 0.5], 0.5),
                (vec![0.3, 0.5], 1.0)
            ]
        );
    }

    #[test]
    fn per_task_values_broadcast() {
        assert_eq!(per_task(vec![0.3], 3, "ratio", None).unwrap(), [0.3; 3]);
        assert_eq!(per_task(vec![], 2, "lambda", Some(1.0)).unwrap(), [1.0; 2]);
        assert!(per_task(vec![], 2, "ratio", None).is_err());
        assert!(per_task(vec![0.1, 0.2], 3, "ratio", None).is_err());
    }

    #[test]
    fn number_lists_parse() {
        assert_eq!(parse_list("0.1, 0.3").unwrap(), [0.1, 0.3]);
        assert_eq!(parse_list("x").unwrap_err().exit_code(), 2);
    }
}
