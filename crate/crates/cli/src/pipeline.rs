//! The pipeline stages behind each subcommand. Every artifact is written
//! atomically and stamped with the config hash and seed(s).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use stagealloc::allocator::{binary_search_lambda, decide, greedy_allocate};
use stagealloc::balancer::{
    compare_controllers, fit_for_seed, hyperparameter_sweep, ClosedLoopResult, ControllerKind,
    DecisionPool,
};
use stagealloc::costbench::{run_bench, ActionResultPredictor, CostEstimator, CostModel};
use stagealloc::envsim::{build_logged_dataset, EpisodeRecord, LoggedDataset, PipelineEnv, RequestContext};
use stagealloc::evaluation::{fit_ground_truth, GroundTruthModel, Protocol};
use stagealloc::experiment::{MethodRun, MethodTag, RunResult};
use stagealloc::io::{read_json, sha256_hex, write_atomic, write_csv, write_json};
use stagealloc::nncore::Checkpoint;

use crate::config::{ExperimentConfig, RunSpec};
use crate::error::{CliError, CliResult};

/// JSON artifact wrapper carrying provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub payload: T,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub hash: String,
    pub force: bool,
    pub verbose: bool,
}

fn log(verbose: bool, msg: impl AsRef<str>) {
    if verbose {
        eprintln!("{}", msg.as_ref());
    }
}

fn require(paths: &[&Path]) -> CliResult<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Missing(missing))
    }
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> CliResult<R> + Sync,
) -> CliResult<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CliResult<R>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// One row of a training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub env_steps: f64,
    pub return_percent: f64,
}

/// An evaluated run, keyed for the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// `run/seedN`, referenced by report cells.
    pub row_id: String,
    pub run: String,
    pub result: RunResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCell {
    pub parameter: String,
    pub value: f64,
    pub run: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub ground_truth_fidelity: f64,
    pub ground_truth_self_return: f64,
    pub runs: Vec<RunRecord>,
    pub sensitivity: Vec<SensitivityCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub row_id: String,
    pub controller: ControllerKind,
    pub seed: u64,
    pub mu: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub source_run: String,
    pub source_seed: u64,
    pub model_holdout_rmse: Vec<(u64, f64)>,
    pub runs: Vec<ControlRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanRow {
    pub request_id: u64,
    pub action: usize,
    pub predicted_q: f64,
    pub true_q: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSummary {
    pub run: String,
    pub seed: u64,
    pub return_percent: f64,
    pub r_s: f64,
    pub predicted_total: f64,
    pub true_total: f64,
    pub cost_total: f64,
    pub logged_cost_total: f64,
    pub lagrangian_budget: f64,
    pub lagrangian_lambda: f64,
    pub lagrangian_true_total: f64,
    pub lagrangian_cost_total: f64,
}

/// Everything loaded once for the training and evaluation stages.
struct Stage {
    env: PipelineEnv,
    data: LoggedDataset,
    gt: GroundTruthModel,
}

impl Stage {
    fn test(&self) -> Vec<&EpisodeRecord> {
        self.data.test()
    }
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, force: bool, verbose: bool) -> Self {
        Self {
            out: cfg.output_dir.clone(),
            hash: cfg.hash(),
            cfg,
            force,
            verbose,
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out.join("data/dataset.jsonl")
    }
    pub fn data_manifest_path(&self) -> PathBuf {
        self.out.join("data/manifest.json")
    }
    pub fn cost_model_path(&self) -> PathBuf {
        self.out.join("cost/cost_model.json")
    }
    pub fn loadtest_path(&self) -> PathBuf {
        self.out.join("cost/loadtests.csv")
    }
    pub fn predictor_path(&self) -> PathBuf {
        self.out.join("cost/predictor.json")
    }
    pub fn ground_truth_path(&self) -> PathBuf {
        self.out.join("ground_truth/model.json")
    }
    pub fn run_dir(&self, run: &str, seed: u64) -> PathBuf {
        self.out.join("train").join(run).join(format!("seed{seed}"))
    }
    pub fn evaluation_path(&self) -> PathBuf {
        self.out.join("eval/results.json")
    }
    pub fn control_path(&self) -> PathBuf {
        self.out.join("control/summary.json")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }

    fn provenance(&self, seeds: &[u64]) -> Vec<(&'static str, String)> {
        let seeds: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
        vec![("config_hash", self.hash.clone()), ("seeds", seeds.join(";"))]
    }

    fn artifact<T>(&self, seeds: &[u64], payload: T) -> Artifact<T> {
        Artifact {
            config_hash: self.hash.clone(),
            seeds: seeds.to_vec(),
            payload,
        }
    }

    fn guard(&self, path: &Path) -> CliResult<()> {
        if path.exists() && !self.force {
            Err(CliError::Exists(path.to_path_buf()))
        } else {
            Ok(())
        }
    }

    fn env(&self) -> CliResult<PipelineEnv> {
        Ok(PipelineEnv::new(self.cfg.env.clone())?)
    }

    fn load_dataset(&self) -> CliResult<LoggedDataset> {
        let path = self.dataset_path();
        require(&[&path])?;
        let data = LoggedDataset::load(&path)?;
        if data.header.env_config_hash != self.cfg.env.content_hash() {
            return Err(CliError::Usage(format!(
                "{} was generated for a different environment; rerun gen-data",
                path.display()
            )));
        }
        Ok(data)
    }

    fn load_estimator(&self) -> CliResult<CostEstimator> {
        let (model_path, pred_path) = (self.cost_model_path(), self.predictor_path());
        require(&[&model_path, &pred_path])?;
        let model: Artifact<CostModel> = read_json(&model_path)?;
        let ckpt = Checkpoint::load(&pred_path)?;
        let predictor = ActionResultPredictor::load_from(&ckpt, "predictor", &self.cfg.cost.predictor)?;
        Ok(CostEstimator {
            model: model.payload,
            predictor,
        })
    }

    /// Loads the ground-truth revenue model, fitting and saving it first if
    /// it is absent.
    fn stage(&self) -> CliResult<Stage> {
        let env = self.env()?;
        let data = self.load_dataset()?;
        let path = self.ground_truth_path();
        let gcfg = &self.cfg.evaluation.ground_truth;
        let gt = if path.exists() {
            GroundTruthModel::load(&env, gcfg, &Checkpoint::load(&path)?)?
        } else {
            log(self.verbose, "fitting ground-truth revenue model");
            let gt = fit_ground_truth(&env, &data, gcfg)?;
            let mut ckpt = Checkpoint::new("ground_truth");
            ckpt.meta.insert("config_hash".into(), self.hash.clone());
            gt.save_into(&mut ckpt)?;
            ckpt.save(&path)?;
            gt
        };
        Ok(Stage { env, data, gt })
    }

    fn validation(&self, stage: &Stage) -> CliResult<Protocol> {
        let test = stage.test();
        let n = self.cfg.evaluation.validation_size.min(test.len());
        Ok(Protocol::new(&stage.env, &test[..n], &stage.gt)?)
    }

    pub fn gen_data(&self) -> CliResult<String> {
        let path = self.dataset_path();
        self.guard(&path)?;
        let env = self.env()?;
        let d = &self.cfg.dataset;
        let data = build_logged_dataset(&env, &d.policy, d.n_requests, d.seed, d.train_fraction)?;
        let dataset_hash = data.save(&path)?;
        let manifest = serde_json::json!({
            "config_hash": self.hash,
            "seed": d.seed,
            "env_config_hash": self.cfg.env.content_hash(),
            "dataset_sha256": dataset_hash,
            "summary": data.summary(&env.action_space()),
        });
        write_json(&self.data_manifest_path(), &manifest)?;
        log(self.verbose, format!("wrote {} episodes to {}", data.episodes.len(), path.display()));
        Ok(dataset_hash)
    }

    pub fn bench_cost(&self) -> CliResult<()> {
        self.guard(&self.cost_model_path())?;
        let data = self.load_dataset()?;
        let bench_cfg = &self.cfg.cost.bench;
        let bench = run_bench(&self.cfg.env, bench_cfg)?;
        write_csv(&self.loadtest_path(), &self.provenance(&[bench_cfg.seed]), &bench.rows)?;

        let pcfg = &self.cfg.cost.predictor;
        let mut predictor = ActionResultPredictor::new(bench.model.layout.clone(), pcfg);
        let losses = predictor.fit(&data.train(), pcfg)?;
        let mut ckpt = Checkpoint::new("action_result_predictor");
        ckpt.meta.insert("config_hash".into(), self.hash.clone());
        predictor.save_into(&mut ckpt, "predictor")?;
        ckpt.save(&self.predictor_path())?;

        let estimator = CostEstimator {
            model: bench.model.clone(),
            predictor,
        };
        let test = data.test();
        let reqs: Vec<&RequestContext> = test.iter().map(|e| &e.request).collect();
        let tables = estimator.cost_tables(&reqs, self.cfg.cost.degradation_level)?;
        let space = self.env()?.action_space();
        let (lo, hi) = (0, space.joint_count() - 1);
        let mean = |a: usize| tables.iter().map(|t| t[a]).sum::<f64>() / tables.len().max(1) as f64;
        write_json(
            &self.cost_model_path(),
            &self.artifact(&[bench_cfg.seed], bench.model),
        )?;
        let manifest = serde_json::json!({
            "config_hash": self.hash,
            "seed": bench_cfg.seed,
            "n_loadtests": bench.rows.len(),
            "predictor_final_loss": losses.last(),
            "min_action_mean_cost": mean(lo),
            "max_action_mean_cost": mean(hi),
        });
        write_json(&self.out.join("cost/manifest.json"), &manifest)?;
        Ok(())
    }

    /// Trains every selected (run, seed), resuming from checkpoints.
    /// `stop_after` caps the iterations of this invocation per run.
    pub fn train(
        &self,
        methods: &[MethodTag],
        seeds: &[u64],
        with_sensitivity: bool,
        stop_after: Option<usize>,
    ) -> CliResult<()> {
        let stage = self.stage()?;
        let validation = self.validation(&stage)?;
        let train = stage.data.train();
        let runs: Vec<RunSpec> = self
            .cfg
            .runs(with_sensitivity || self.cfg.sensitivity.enabled)
            .into_iter()
            .filter(|r| methods.is_empty() || methods.contains(&r.method))
            .collect();
        if runs.is_empty() {
            return Err(CliError::Usage("no configured run matches --method".into()));
        }
        let seeds: Vec<u64> = if seeds.is_empty() { self.cfg.seeds.clone() } else { seeds.to_vec() };
        let jobs: Vec<(&RunSpec, u64)> = runs
            .iter()
            .flat_map(|r| seeds.iter().map(move |&s| (r, s)))
            .collect();
        parallel_map(&jobs, self.cfg.workers, |(spec, seed)| {
            self.train_one(&stage, &train, &validation, spec, *seed, stop_after)
        })?;
        Ok(())
    }

    fn train_one(
        &self,
        stage: &Stage,
        train: &[&EpisodeRecord],
        validation: &Protocol,
        spec: &RunSpec,
        seed: u64,
        stop_after: Option<usize>,
    ) -> CliResult<()> {
        let dir = self.run_dir(&spec.name, seed);
        let ckpt_path = dir.join("checkpoint.json");
        let mut run = MethodRun::new(&stage.env, train, spec.method, &spec.profile, seed)?;
        if ckpt_path.exists() && !self.force {
            run.restore(&Checkpoint::load(&ckpt_path)?)?;
            if run.is_done() {
                log(self.verbose, format!("{} seed {seed}: complete", spec.name));
                return Ok(());
            }
            log(self.verbose, format!("{} seed {seed}: resuming at {}", spec.name, run.iteration()));
        }
        let limit = stop_after.map_or(usize::MAX, |n| run.iteration() + n);
        let every = self.cfg.checkpoint_every;
        while !run.is_done() && run.iteration() < limit {
            let target = ((run.iteration() / every + 1) * every).min(limit);
            // A failure here leaves the previous checkpoint in place.
            run.advance(&stage.env, validation, target)?;
            self.save_run(&run, &dir)?;
            log(
                self.verbose,
                format!("{} seed {seed}: iteration {}/{}", spec.name, run.iteration(), spec.profile.iterations),
            );
        }
        Ok(())
    }

    fn save_run(&self, run: &MethodRun, dir: &Path) -> CliResult<()> {
        let mut ckpt = run.checkpoint()?;
        ckpt.meta.insert("config_hash".into(), self.hash.clone());
        ckpt.save(&dir.join("checkpoint.json"))?;
        let p = run.progress();
        let prov = self.provenance(&[run.seed]);
        let rows: Vec<LogRow> = p
            .losses
            .iter()
            .zip(&p.grad_norms)
            .enumerate()
            .map(|(i, (l, g))| LogRow {
                iteration: i + 1,
                loss: *l,
                grad_norm: *g,
            })
            .collect();
        write_csv(&dir.join("log.csv"), &prov, &rows)?;
        let curve: Vec<CurveRow> = p
            .curve
            .iter()
            .map(|&(env_steps, return_percent)| CurveRow {
                env_steps,
                return_percent,
            })
            .collect();
        write_csv(&dir.join("curve.csv"), &prov, &curve)?;
        Ok(())
    }

    /// Restores a completed run; `Err(path)` when absent or unfinished.
    fn completed_run(
        &self,
        stage: &Stage,
        train: &[&EpisodeRecord],
        spec: &RunSpec,
        seed: u64,
    ) -> CliResult<Result<MethodRun, String>> {
        let path = self.run_dir(&spec.name, seed).join("checkpoint.json");
        if !path.exists() {
            return Ok(Err(path.display().to_string()));
        }
        let mut run = MethodRun::new(&stage.env, train, spec.method, &spec.profile, seed)?;
        run.restore(&Checkpoint::load(&path)?)?;
        if run.is_done() {
            Ok(Ok(run))
        } else {
            Ok(Err(format!("{} (unfinished at {})", path.display(), run.iteration())))
        }
    }

    pub fn evaluate(&self, with_sensitivity: bool) -> CliResult<EvaluationReport> {
        let stage = self.stage()?;
        let test = stage.test();
        let protocol = Protocol::new(&stage.env, &test, &stage.gt)?;
        let train = stage.data.train();
        let sens = with_sensitivity || self.cfg.sensitivity.enabled;
        let runs = self.cfg.runs(sens);
        let jobs: Vec<(&RunSpec, u64)> = runs
            .iter()
            .flat_map(|r| self.cfg.seeds.iter().map(move |&s| (r, s)))
            .collect();
        let outcomes = parallel_map(&jobs, self.cfg.workers, |(spec, seed)| {
            Ok(match self.completed_run(&stage, &train, spec, *seed)? {
                Ok(run) => Ok(RunRecord {
                    row_id: format!("{}/seed{seed}", spec.name),
                    run: spec.name.clone(),
                    result: run.finish(&stage.env, &protocol)?,
                }),
                Err(missing) => Err(missing),
            })
        })?;
        let mut records = Vec::new();
        let mut missing = Vec::new();
        for o in outcomes {
            match o {
                Ok(r) => records.push(r),
                Err(m) => missing.push(m),
            }
        }
        if !missing.is_empty() {
            return Err(CliError::Missing(missing));
        }
        let report = EvaluationReport {
            ground_truth_fidelity: protocol.ground_truth_fidelity(&stage.env)?,
            ground_truth_self_return: protocol.evaluate(&stage.env, &stage.gt)?.return_percent,
            runs: records,
            sensitivity: if sens {
                self.cfg
                    .sensitivity_grid()
                    .into_iter()
                    .map(|(p, v, spec)| SensitivityCell {
                        parameter: p.into(),
                        value: v,
                        run: spec.name,
                    })
                    .collect()
            } else {
                Vec::new()
            },
        };
        write_json(&self.evaluation_path(), &self.artifact(&self.cfg.seeds, report.clone()))?;
        #[derive(Serialize)]
        struct Row<'a> {
            row_id: &'a str,
            run: &'a str,
            seed: u64,
            return_percent: f64,
            r_s: f64,
            convergence_steps: f64,
            convergence_reached: bool,
            gradient_variance: f64,
            final_loss: f64,
        }
        let rows: Vec<Row> = report
            .runs
            .iter()
            .map(|r| Row {
                row_id: &r.row_id,
                run: &r.run,
                seed: r.result.seed,
                return_percent: r.result.return_percent,
                r_s: r.result.r_s,
                convergence_steps: r.result.convergence.steps,
                convergence_reached: r.result.convergence.reached,
                gradient_variance: r.result.gradient_variance,
                final_loss: r.result.final_loss,
            })
            .collect();
        write_csv(&self.out.join("eval/results.csv"), &self.provenance(&self.cfg.seeds), &rows)?;
        Ok(report)
    }

    fn restore_source(&self, stage: &Stage, method: MethodTag, seed: u64) -> CliResult<MethodRun> {
        let spec = self
            .cfg
            .runs(true)
            .into_iter()
            .find(|r| r.method == method && r.name == method.tag())
            .ok_or_else(|| CliError::Usage(format!("{method} is not a configured method")))?;
        let train = stage.data.train();
        match self.completed_run(stage, &train, &spec, seed)? {
            Ok(run) => Ok(run),
            Err(missing) => Err(CliError::Missing(vec![missing])),
        }
    }

    pub fn allocate(&self, method: MethodTag, seed: u64) -> CliResult<AllocationSummary> {
        let estimator = self.load_estimator()?;
        let stage = self.stage()?;
        let run = self.restore_source(&stage, method, seed)?;
        let test = stage.test();
        let protocol = Protocol::new(&stage.env, &test, &stage.gt)?;
        let reqs = protocol.request_refs();
        let q = run.trainer.source().q_tables(&stage.env, &reqs)?;
        let c = estimator.cost_tables(&reqs, self.cfg.cost.degradation_level)?;
        let eval = protocol.evaluate_tables(&q)?;
        let plan = greedy_allocate(&q, &protocol.quota)?;
        let gt = &protocol.gt_tables;
        let rows: Vec<PlanRow> = test
            .iter()
            .zip(&plan.actions)
            .enumerate()
            .map(|(m, (e, &a))| PlanRow {
                request_id: e.request_id,
                action: a,
                predicted_q: q[m][a],
                true_q: gt[m][a],
                cost: c[m][a],
            })
            .collect();
        let logged_cost: f64 = protocol.logged_actions.iter().enumerate().map(|(m, &a)| c[m][a]).sum();
        let budget = self.cfg.allocate.budget_fraction * logged_cost;
        let search = binary_search_lambda(&q, &c, budget)?;
        let (mut lag_true, mut lag_cost) = (0.0, 0.0);
        for m in 0..q.len() {
            let a = decide(&q[m], &c[m], search.lambda);
            lag_true += gt[m][a];
            lag_cost += c[m][a];
        }
        let summary = AllocationSummary {
            run: method.tag().into(),
            seed,
            return_percent: eval.return_percent,
            r_s: eval.r_s,
            predicted_total: plan.predicted_total(),
            true_total: plan.evaluate(gt)?,
            cost_total: rows.iter().map(|r| r.cost).sum(),
            logged_cost_total: logged_cost,
            lagrangian_budget: budget,
            lagrangian_lambda: search.lambda,
            lagrangian_true_total: lag_true,
            lagrangian_cost_total: lag_cost,
        };
        let dir = self.out.join("alloc").join(format!("{}_seed{seed}", method.tag()));
        write_csv(&dir.join("plan.csv"), &self.provenance(&[seed]), &rows)?;
        write_json(&dir.join("summary.json"), &self.artifact(&[seed], summary.clone()))?;
        Ok(summary)
    }

    /// The decision pool: the source run's Q tables and estimated costs on
    /// the leading test-split requests.
    pub fn decision_pool(&self) -> CliResult<DecisionPool> {
        let estimator = self.load_estimator()?;
        let stage = self.stage()?;
        let run = self.restore_source(&stage, self.cfg.control.source_method, self.cfg.control_seed())?;
        let test = stage.test();
        let n = self.cfg.control.pool_size.min(test.len());
        let reqs: Vec<&RequestContext> = test[..n].iter().map(|e| &e.request).collect();
        let q = run.trainer.source().q_tables(&stage.env, &reqs)?;
        let c = estimator.cost_tables(&reqs, self.cfg.cost.degradation_level)?;
        Ok(DecisionPool::new(q, c)?)
    }

    pub fn control(&self) -> CliResult<ControlReport> {
        let pool = self.decision_pool()?;
        let cc = &self.cfg.control;
        let bal = &cc.balancer;
        let per_seed = parallel_map(&self.cfg.seeds, self.cfg.workers, |&seed| {
            let model = fit_for_seed(&pool, bal, seed)?;
            let results: Vec<ClosedLoopResult> = cc
                .controllers
                .iter()
                .map(|&k| {
                    stagealloc::balancer::closed_loop_run(&pool, k, Some(&model), bal, seed)
                })
                .collect::<stagealloc::Result<_>>()?;
            Ok((seed, model.holdout_rmse, results))
        })?;
        let dir = self.out.join("control");
        let mut runs = Vec::new();
        let mut rmse = Vec::new();
        for (seed, err, results) in &per_seed {
            rmse.push((*seed, *err));
            for r in results {
                write_csv(
                    &dir.join(format!("trace_{}_seed{seed}.csv", r.controller.tag())),
                    &self.provenance(&[*seed]),
                    &r.trace,
                )?;
                runs.push(ControlRecord {
                    row_id: format!("{}/seed{seed}", r.controller.tag()),
                    controller: r.controller,
                    seed: *seed,
                    mu: r.mu,
                    nu: r.nu,
                });
            }
        }
        if cc.sweep {
            let seed = self.cfg.seeds[0];
            let model = fit_for_seed(&pool, bal, seed)?;
            let rows = hyperparameter_sweep(&pool, &model, bal, seed)?;
            write_csv(&dir.join("sweep.csv"), &self.provenance(&[seed]), &rows)?;
        }
        let report = ControlReport {
            source_run: cc.source_method.tag().into(),
            source_seed: self.cfg.control_seed(),
            model_holdout_rmse: rmse,
            runs,
        };
        write_json(&self.control_path(), &self.artifact(&self.cfg.seeds, report.clone()))?;
        Ok(report)
    }

    /// Convenience for the report and tests: every controller's μ/ν run.
    pub fn compare(&self, pool: &DecisionPool, seed: u64) -> CliResult<Vec<ClosedLoopResult>> {
        Ok(compare_controllers(pool, &self.cfg.control.controllers, &self.cfg.control.balancer, seed)?)
    }

    pub fn report(&self) -> CliResult<PathBuf> {
        let eval: Option<Artifact<EvaluationReport>> = match self.evaluation_path() {
            p if p.exists() => Some(read_json(&p)?),
            _ => None,
        };
        let control: Option<Artifact<ControlReport>> = match self.control_path() {
            p if p.exists() => Some(read_json(&p)?),
            _ => None,
        };
        let (md, cells) = crate::report::render(
            &self.cfg,
            eval.as_ref().map(|a| &a.payload),
            control.as_ref().map(|a| &a.payload),
        );
        let dir = self.report_dir();
        let header = format!("<!-- config_hash={} -->\n", self.hash);
        write_atomic(&dir.join("report.md"), format!("{header}{md}").as_bytes())?;
        write_csv(&dir.join("cells.csv"), &self.provenance(&self.cfg.seeds), &cells)?;
        Ok(dir.join("report.md"))
    }

    /// SHA-256 of every file under the output directory, by relative path.
    pub fn artifact_hashes(&self) -> CliResult<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![self.out.clone()];
        while let Some(dir) = stack.pop() {
            let entries = std::fs::read_dir(&dir).map_err(|e| stagealloc::Error::io(&dir, e))?;
            for entry in entries {
                let path = entry.map_err(|e| stagealloc::Error::io(&dir, e))?.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let bytes = std::fs::read(&path).map_err(|e| stagealloc::Error::io(&path, e))?;
                    let rel = path.strip_prefix(&self.out).unwrap_or(&path);
                    out.insert(rel.display().to_string(), sha256_hex(&bytes));
                }
            }
        }
        Ok(out)
    }
}
