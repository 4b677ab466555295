use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{evaluate_model, median, PckResult};
use crate::adapt_engine::{adapt, apply_override, branch_gap, init_model, pretrain, ExperimentConfig, ExperimentData, RunOptions, TrainLog};
use crate::error::{Error, Result};
use crate::model_zoo::{Model, ParamGroup};

/// Names accepted by [`AblationPlan::bundled`].
pub const BUNDLED_PLANS: [&str; 5] = ["relations", "structures", "loss-variants", "sensitivity", "headline"];

/// Position of an arm on a one-parameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub parameter: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    /// `key.path=value` overrides applied on top of the plan's base config.
    pub overrides: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepPoint>,
}

impl AblationArm {
    pub fn new(name: &str, overrides: &[&str]) -> Self {
        Self { name: name.into(), overrides: overrides.iter().map(|s| s.to_string()).collect(), sweep: None }
    }

    fn swept(mut self, parameter: &str, value: f64) -> Self {
        self.sweep = Some(SweepPoint { parameter: parameter.into(), value });
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub name: String,
    pub base: ExperimentConfig,
    pub arms: Vec<AblationArm>,
    pub seeds: Vec<u64>,
}

impl AblationPlan {
    pub fn new(name: &str, base: ExperimentConfig, arms: Vec<AblationArm>, seeds: Vec<u64>) -> Result<Self> {
        let plan = Self { name: name.into(), base, arms, seeds };
        plan.validate()?;
        Ok(plan)
    }

    /// Names are unique, seeds are present, and every arm resolves to a valid
    /// configuration.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.arms.is_empty() {
            return Err(Error::Config(format!("plan `{}` needs at least one arm and one seed", self.name)));
        }
        let mut seen = BTreeSet::new();
        for arm in &self.arms {
            if !seen.insert(arm.name.as_str()) {
                return Err(Error::Config(format!("plan `{}` lists arm `{}` twice", self.name, arm.name)));
            }
            self.arm_config(arm, self.seeds[0]).map_err(|e| Error::Config(format!("arm `{}`: {e}", arm.name)))?;
        }
        Ok(())
    }

    pub fn arm_config(&self, arm: &AblationArm, seed: u64) -> Result<ExperimentConfig> {
        let mut value = self.base.to_value();
        for o in &arm.overrides {
            apply_override(&mut value, o)?;
        }
        value["seed"] = Value::from(seed);
        ExperimentConfig::from_value(value)
    }

    /// One of the [`BUNDLED_PLANS`] on top of `base`.
    pub fn bundled(name: &str, base: ExperimentConfig, seeds: Vec<u64>) -> Result<Self> {
        let arms = match name {
            "relations" => relation_arms(),
            "structures" => structure_arms(),
            "loss-variants" => ["mmd", "mse", "kl"]
                .iter()
                .map(|m| AblationArm { name: m.to_uppercase(), overrides: vec![format!("dl_variant={m}")], sweep: None })
                .collect(),
            "sensitivity" => sensitivity_arms(),
            "headline" => vec![AblationArm::new("Source-only", &["adapt.epochs=0"]), AblationArm::new("IDF w/ DL", &[])],
            other => {
                return Err(Error::Config(format!("unknown plan `{other}`; expected one of {}", BUNDLED_PLANS.join(", "))))
            }
        };
        Self::new(name, base, arms, seeds)
    }
}

fn relation_arms() -> Vec<AblationArm> {
    let subsets: [&[&str]; 7] =
        [&["r1"], &["r2"], &["r3"], &["r1", "r2"], &["r1", "r3"], &["r2", "r3"], &["r1", "r2", "r3"]];
    subsets
        .iter()
        .map(|s| {
            let list = s.iter().map(|r| format!("\"{r}\"")).collect::<Vec<_>>().join(",");
            AblationArm { name: s.join(" & "), overrides: vec![format!("relation_mask=[{list}]")], sweep: None }
        })
        .collect()
}

fn structure_arms() -> Vec<AblationArm> {
    let mut arms = vec![
        AblationArm::new("Baseline", &["variant=baseline", "dl_terms=none"]),
        AblationArm::new("Baseline w/ DL", &["variant=baseline", "dl_terms=full"]),
    ];
    for (tag, label) in [("aidf", "AIDF"), ("idf", "IDF")] {
        for (terms, suffix) in [("none", ""), ("inter", " w/ Inter"), ("spec", " w/ Spec"), ("full", " w/ DL")] {
            arms.push(AblationArm {
                name: format!("{label}{suffix}"),
                overrides: vec![format!("variant={tag}"), format!("dl_terms={terms}")],
                sweep: None,
            });
        }
    }
    arms
}

fn sensitivity_arms() -> Vec<AblationArm> {
    let mut arms = Vec::new();
    for a in [0.3, 0.4, 0.5, 0.6] {
        arms.push(AblationArm::new(&format!("alpha={a}"), &[&format!("alpha1={a}"), &format!("alpha2={a}")]).swept("alpha", a));
    }
    for b in [0.1, 0.2, 0.3, 0.4] {
        arms.push(AblationArm::new(&format!("beta={b}"), &[&format!("beta={b}")]).swept("beta", b));
    }
    for g in [0.35, 0.45, 0.55, 0.65] {
        arms.push(AblationArm::new(&format!("gamma={g}"), &[&format!("gamma={g}")]).swept("gamma", g));
    }
    arms
}

/// Evaluation of one finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub target: PckResult,
    pub source: PckResult,
    pub unseen: PckResult,
    /// `mse(F∘G, F_a∘G)` on the target evaluation split, when the model has
    /// an adversarial head.
    pub branch_gap: Option<f64>,
}

/// Evaluates `model` on every held-out split of `data`.
pub fn evaluate_splits(model: &Model, data: &ExperimentData, cfg: &ExperimentConfig) -> Result<RunMetrics> {
    let gap = if model.has_group(ParamGroup::Fa) {
        let n = cfg.eval.batch_size.min(data.target_eval.len());
        Some(branch_gap(model, &data.target_eval.head(n).images)?)
    } else {
        None
    };
    Ok(RunMetrics {
        target: evaluate_model(model, &data.target_eval, cfg)?,
        source: evaluate_model(model, &data.source_eval, cfg)?,
        unseen: evaluate_model(model, &data.unseen_eval, cfg)?,
        branch_gap: gap,
    })
}

/// Source pretraining from a fresh initialization.
pub fn pretrain_model(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<(Model, TrainLog)> {
    let mut model = init_model(cfg)?;
    let log = pretrain(&mut model, &data.source, cfg, &RunOptions::default())?;
    Ok((model, log))
}

/// Adapts a copy of `pretrained` (whose backbone and inference head are
/// reused) under `cfg` and evaluates it.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    pretrained: &Model,
    opts: &RunOptions,
) -> Result<(Model, TrainLog, RunMetrics)> {
    let mut model = init_model(cfg)?;
    model.copy_groups_from(pretrained, &[ParamGroup::G, ParamGroup::F])?;
    let log = adapt(&mut model, &data.source, &data.target, cfg, opts)?;
    let metrics = evaluate_splits(&model, data, cfg)?;
    Ok((model, log, metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepPoint>,
    /// Target overall PCK per seed, in plan seed order; `None` for failed runs.
    pub per_seed: Vec<Option<f64>>,
    pub overall: Option<f64>,
    pub groups: BTreeMap<String, f64>,
    pub source: Option<f64>,
    pub unseen: Option<f64>,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub plan: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<ArmRun>,
}

impl AblationTable {
    fn build(plan: &AblationPlan, runs: Vec<ArmRun>) -> Self {
        let rows = plan
            .arms
            .iter()
            .map(|arm| {
                let mine: Vec<&ArmRun> = plan
                    .seeds
                    .iter()
                    .map(|&s| runs.iter().find(|r| r.arm == arm.name && r.seed == s).expect("every arm and seed ran"))
                    .collect();
                let ok: Vec<&RunMetrics> = mine.iter().filter_map(|r| r.metrics.as_ref()).collect();
                let med = |f: &dyn Fn(&RunMetrics) -> Option<f64>| median(&ok.iter().filter_map(|m| f(m)).collect::<Vec<_>>());
                let group_names: BTreeSet<&String> = ok.iter().flat_map(|m| m.target.groups.keys()).collect();
                AblationRow {
                    arm: arm.name.clone(),
                    sweep: arm.sweep.clone(),
                    per_seed: mine.iter().map(|r| r.metrics.as_ref().map(|m| m.target.overall)).collect(),
                    overall: med(&|m| Some(m.target.overall)),
                    groups: group_names
                        .into_iter()
                        .filter_map(|g| med(&|m| m.target.groups.get(g).copied()).map(|v| (g.clone(), v)))
                        .collect(),
                    source: med(&|m| Some(m.source.overall)),
                    unseen: med(&|m| Some(m.unseen.overall)),
                    failures: mine.iter().filter(|r| r.metrics.is_none()).count(),
                }
            })
            .collect();
        Self { plan: plan.name.clone(), seeds: plan.seeds.clone(), rows, runs }
    }

    pub fn row(&self, arm: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    fn group_names(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.groups.keys()).collect();
        set.into_iter().cloned().collect()
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let groups = self.group_names();
        let mut s = String::from("arm");
        for seed in &self.seeds {
            write!(s, ",seed_{seed}").unwrap();
        }
        s.push_str(",overall");
        for g in &groups {
            write!(s, ",{g}").unwrap();
        }
        s.push_str(",source,unseen,failures\n");
        for r in &self.rows {
            s.push_str(&csv_field(&r.arm));
            for v in &r.per_seed {
                write!(s, ",{}", fmt(*v)).unwrap();
            }
            write!(s, ",{}", fmt(r.overall)).unwrap();
            for g in &groups {
                write!(s, ",{}", fmt(r.groups.get(g).copied())).unwrap();
            }
            writeln!(s, ",{},{},{}", fmt(r.source), fmt(r.unseen), r.failures).unwrap();
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }

    /// Fixed-width rendering with PCK in percent; medians over seeds.
    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
        let groups = self.group_names();
        let mut header = vec!["Method".to_string()];
        header.extend(groups.iter().cloned());
        header.extend(["Overall", "Source", "Unseen"].map(String::from));
        let mut body: Vec<Vec<String>> = Vec::new();
        for r in &self.rows {
            let mut line = vec![if r.failures > 0 { format!("{} ({} failed)", r.arm, r.failures) } else { r.arm.clone() }];
            line.extend(groups.iter().map(|g| pct(r.groups.get(g).copied())));
            line.extend([pct(r.overall), pct(r.source), pct(r.unseen)]);
            body.push(line);
        }
        let widths: Vec<usize> =
            (0..header.len()).map(|c| body.iter().map(|l| l[c].len()).chain([header[c].len()]).max().unwrap_or(0)).collect();
        let render = |l: &[String]| {
            let cells: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
                .collect();
            cells.join("  ").trim_end().to_string() + "\n"
        };
        let mut s = format!("{} (target PCK@{}, median over seeds {:?})\n", self.plan, self.threshold_label(), self.seeds);
        s.push_str(&render(&header));
        s.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        s.push('\n');
        for l in &body {
            s.push_str(&render(l));
        }
        s
    }

    fn threshold_label(&self) -> String {
        self.runs
            .iter()
            .find_map(|r| r.metrics.as_ref().map(|m| m.target.threshold_ratio.to_string()))
            .unwrap_or_else(|| "?".into())
    }

    /// Writes `table.csv`, `table.json` and `table.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("table.csv", self.to_csv()), ("table.json", self.to_json()), ("table.txt", self.to_text())] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, Default)]
pub struct AblationOptions {
    /// Where to write per-run logs, config snapshots and the result tables.
    pub out_dir: Option<PathBuf>,
    /// Worker threads; `POSEADAPT_THREADS` or all cores when unset.
    pub threads: Option<usize>,
}

fn thread_count(opts: &AblationOptions) -> usize {
    opts.threads
        .or_else(|| std::env::var("POSEADAPT_THREADS").ok().and_then(|v| v.parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

fn data_key(cfg: &ExperimentConfig) -> String {
    serde_json::to_string(&(cfg.seed, &cfg.data)).expect("config serializes")
}

/// Everything pretraining depends on.
fn pretrain_key(cfg: &ExperimentConfig) -> String {
    serde_json::to_string(&(cfg.seed, &cfg.data, &cfg.pretrain, &cfg.codec, &cfg.oks, &cfg.backbone, cfg.head_width))
        .expect("config serializes")
}

fn arm_dir(out: &Path, arm: &str, seed: u64) -> PathBuf {
    let safe: String = arm.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
    out.join("runs").join(safe).join(format!("seed{seed}"))
}

/// Runs every arm for every seed and aggregates medians. Data and pretrained
/// models are shared between arms that agree on the settings they depend on.
/// Failed runs are recorded and the rest continue.
pub fn run_ablation(plan: &AblationPlan, opts: &AblationOptions) -> Result<AblationTable> {
    plan.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(opts))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut jobs = Vec::new();
    for &seed in &plan.seeds {
        for arm in &plan.arms {
            jobs.push((arm, seed, plan.arm_config(arm, seed)?));
        }
    }
    let mut data_cfgs: BTreeMap<String, &ExperimentConfig> = BTreeMap::new();
    let mut pre_cfgs: BTreeMap<String, &ExperimentConfig> = BTreeMap::new();
    for (_, _, cfg) in &jobs {
        data_cfgs.entry(data_key(cfg)).or_insert(cfg);
        pre_cfgs.entry(pretrain_key(cfg)).or_insert(cfg);
    }

    pool.install(|| -> Result<AblationTable> {
        let datasets: BTreeMap<String, Result<ExperimentData>> =
            data_cfgs.into_par_iter().map(|(k, cfg)| (k, ExperimentData::generate(cfg))).collect();
        let pretrained: BTreeMap<String, Result<Model>> = pre_cfgs
            .into_par_iter()
            .map(|(k, cfg)| {
                let model = match &datasets[&data_key(cfg)] {
                    Ok(data) => pretrain_model(cfg, data).map(|(m, _)| m),
                    Err(e) => Err(Error::Config(format!("data generation failed: {e}"))),
                };
                log::info!("pretrained seed {}: {}", cfg.seed, if model.is_ok() { "ok" } else { "failed" });
                (k, model)
            })
            .collect();

        let runs: Vec<ArmRun> = jobs
            .par_iter()
            .map(|(arm, seed, cfg)| {
                let dir = opts.out_dir.as_deref().map(|o| arm_dir(o, &arm.name, *seed));
                let outcome = (|| -> Result<RunMetrics> {
                    let data = datasets[&data_key(cfg)].as_ref().map_err(|e| Error::Config(e.to_string()))?;
                    let pre = pretrained[&pretrain_key(cfg)].as_ref().map_err(|e| Error::Config(format!("pretraining failed: {e}")))?;
                    if let Some(d) = &dir {
                        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                        fs::write(d.join("config.json"), cfg.to_json()).map_err(|e| Error::io(d, e))?;
                    }
                    let (_, log, metrics) = run_experiment(cfg, data, pre, &RunOptions::default())?;
                    if let Some(d) = &dir {
                        log.write_jsonl(&d.join("train_log.jsonl"))?;
                        let m = serde_json::to_string_pretty(&metrics)? + "\n";
                        fs::write(d.join("metrics.json"), m).map_err(|e| Error::io(d, e))?;
                    }
                    Ok(metrics)
                })();
                match &outcome {
                    Ok(m) => log::info!("{} / seed {seed}: target PCK {:.4}", arm.name, m.target.overall),
                    Err(e) => log::warn!("{} / seed {seed} failed: {e}", arm.name),
                }
                ArmRun {
                    arm: arm.name.clone(),
                    seed: *seed,
                    error: outcome.as_ref().err().map(ToString::to_string),
                    metrics: outcome.ok(),
                }
            })
            .collect();
        let table = AblationTable::build(plan, runs);
        if let Some(out) = &opts.out_dir {
            table.write(out)?;
            let p = out.join("plan.json");
            fs::write(&p, serde_json::to_string_pretty(plan)? + "\n").map_err(|e| Error::io(&p, e))?;
        }
        Ok(table)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeds() -> Vec<u64> {
        vec![0, 1, 2]
    }

    #[test]
    fn bundled_plans_have_the_documented_arms() {
        let base = ExperimentConfig::default();
        let rel = AblationPlan::bundled("relations", base.clone(), seeds()).unwrap();
        assert_eq!(rel.arms.len(), 7);
        assert_eq!(rel.arms[6].name, "r1 & r2 & r3");
        let c = rel.arm_config(&rel.arms[0], 5).unwrap();
        assert_eq!((c.relation_mask.r1, c.relation_mask.r2, c.relation_mask.r3, c.seed), (true, false, false, 5));

        let st = AblationPlan::bundled("structures", base.clone(), seeds()).unwrap();
        let names: Vec<&str> = st.arms.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "Baseline",
                "Baseline w/ DL",
                "AIDF",
                "AIDF w/ Inter",
                "AIDF w/ Spec",
                "AIDF w/ DL",
                "IDF",
                "IDF w/ Inter",
                "IDF w/ Spec",
                "IDF w/ DL"
            ]
        );
        assert_eq!(AblationPlan::bundled("loss-variants", base.clone(), seeds()).unwrap().arms.len(), 3);
        let sens = AblationPlan::bundled("sensitivity", base.clone(), seeds()).unwrap();
        let gammas: Vec<f64> =
            sens.arms.iter().filter_map(|a| a.sweep.as_ref().filter(|s| s.parameter == "gamma").map(|s| s.value)).collect();
        assert_eq!(gammas, [0.35, 0.45, 0.55, 0.65]);
        assert!(AblationPlan::bundled("nope", base, seeds()).is_err());
    }

    #[test]
    fn duplicate_arm_names_are_rejected() {
        let arms = vec![AblationArm::new("a", &[]), AblationArm::new("a", &["beta=0.1"])];
        assert!(AblationPlan::new("p", ExperimentConfig::default(), arms, seeds()).is_err());
    }

    #[test]
    fn invalid_overrides_are_rejected_up_front() {
        let arms = vec![AblationArm::new("a", &["beta=-1"])];
        assert!(AblationPlan::new("p", ExperimentConfig::default(), arms, seeds()).is_err());
        let arms = vec![AblationArm::new("a", &["no.such.key=1"])];
        assert!(AblationPlan::new("p", ExperimentConfig::default(), arms, seeds()).is_err());
    }

    fn fake_metrics(overall: f64) -> RunMetrics {
        let r = PckResult {
            per_joint: vec![Some(overall)],
            groups: [("all".to_string(), overall)].into_iter().collect(),
            overall,
            threshold_ratio: 0.05,
            sample_count: 1,
        };
        RunMetrics { target: r.clone(), source: r.clone(), unseen: r, branch_gap: None }
    }

    #[test]
    fn table_takes_medians_and_counts_failures() {
        let plan = AblationPlan::new(
            "p",
            ExperimentConfig::default(),
            vec![AblationArm::new("x", &[]), AblationArm::new("y", &["beta=0.1"])],
            seeds(),
        )
        .unwrap();
        let mut runs = Vec::new();
        for (arm, vals) in [("x", [Some(0.2), Some(0.6), Some(0.4)]), ("y", [Some(0.5), None, Some(0.7)])] {
            for (seed, v) in seeds().into_iter().zip(vals) {
                runs.push(ArmRun {
                    arm: arm.into(),
                    seed,
                    metrics: v.map(fake_metrics),
                    error: v.is_none().then(|| "diverged".to_string()),
                });
            }
        }
        let t = AblationTable::build(&plan, runs);
        assert_eq!(t.row("x").unwrap().overall, Some(0.4));
        let y = t.row("y").unwrap();
        assert_eq!((y.overall, y.failures), (Some(0.6), 1));
        assert_eq!(y.per_seed, vec![Some(0.5), None, Some(0.7)]);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("arm,seed_0,seed_1,seed_2,overall,all,source,unseen,failures\n"));
        assert!(t.to_text().contains("y (1 failed)"));
        let back: AblationTable = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(back, t);
    }
}
