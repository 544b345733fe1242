//! Manifests and the make-data / train / eval / repro pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::PreparedQuery;
use crate::dataset::{build_fewshot_dataset, DatasetConfig, FewShotDataset, Setting};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, ResultTable};
use crate::kg::{generate_synthetic_kg, GraphMeta, GraphSplit, SyntheticParams};
use crate::query::{OperatorTypeKey, Scheme};
use crate::train::{inference_adapt, Algorithm, Checkpoint, TrainConfig, Trainer, TrainingSet};

/// Steps between periodic checkpoints.
pub const CHECKPOINT_EVERY: u64 = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphSource {
    Synthetic(SyntheticParams),
    /// A directory holding `train.txt`, `valid.txt`, `test.txt` and `meta.json`.
    Path(PathBuf),
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentManifest {
    pub setting: Setting,
    pub graph: GraphSource,
    pub pool_size_per_type: usize,
    pub retention_ratio: f64,
    pub eval_queries_per_type: usize,
    pub dataset_seed: u64,
    pub train: TrainConfig,
    /// Training seeds averaged by `repro`.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Overrides the checkpoint location of `train` and `eval`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            setting: Setting::MultiHop,
            graph: GraphSource::Synthetic(SyntheticParams::default()),
            pool_size_per_type: d.pool_size_per_type,
            retention_ratio: d.retention_ratio,
            eval_queries_per_type: d.eval_queries_per_type,
            dataset_seed: d.seed,
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            out: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

/// Command-line values that take precedence over the manifest file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub setting: Option<Setting>,
    pub algorithm: Option<Algorithm>,
    pub scheme: Option<Scheme>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentManifest {
    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.setting {
            self.setting = s;
        }
        if let Some(a) = o.algorithm {
            self.train.algorithm = a;
            if a != Algorithm::Mamo {
                self.train.scheme = None;
            }
        }
        if let Some(s) = o.scheme {
            self.train.scheme = Some(s);
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.seeds = vec![seed];
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            setting: self.setting,
            pool_size_per_type: self.pool_size_per_type,
            retention_ratio: self.retention_ratio,
            eval_queries_per_type: self.eval_queries_per_type,
            seed: self.dataset_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.train.validate()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn graph_dir(&self) -> PathBuf {
        self.out.join("graph")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join("runs").join(run_name(&self.train))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.run_dir().join("checkpoint.json"))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))
    }
}

/// Directory name of a training run, e.g. `mamo-O-s2`.
pub fn run_name(config: &TrainConfig) -> String {
    match config.scheme {
        Some(s) if config.algorithm == Algorithm::Mamo => format!("mamo-{s}-s{}", config.seed),
        _ => format!("{}-s{}", config.algorithm, config.seed),
    }
}

/// Table row label, e.g. `MAMO(O)`.
pub fn row_label(algorithm: Algorithm, scheme: Option<Scheme>) -> String {
    match (algorithm, scheme) {
        (Algorithm::Vanilla, _) => "Vanilla".into(),
        (Algorithm::Maml, _) => "MAML".into(),
        (Algorithm::Mamo, Some(s)) => format!("MAMO({s})"),
        (Algorithm::Mamo, None) => "MAMO".into(),
    }
}

/// Rows compared by `repro` in each setting.
pub fn repro_rows(setting: Setting) -> Vec<(Algorithm, Option<Scheme>)> {
    let schemes: &[Scheme] = match setting {
        Setting::MultiHop => &[Scheme::R, Scheme::L, Scheme::I, Scheme::O],
        Setting::Epfo => &[Scheme::R, Scheme::L, Scheme::I, Scheme::O, Scheme::BO],
        Setting::Efo1 => &Scheme::ALL,
    };
    [(Algorithm::Vanilla, None), (Algorithm::Maml, None)]
        .into_iter()
        .chain(schemes.iter().map(|s| (Algorithm::Mamo, Some(*s))))
        .collect()
}

fn load_graph(m: &ExperimentManifest) -> Result<GraphSplit> {
    match &m.graph {
        GraphSource::Synthetic(p) => generate_synthetic_kg(p),
        GraphSource::Path(dir) => GraphSplit::load(dir),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the graph split, the few-shot dataset and a manifest copy under `out`.
pub fn cmd_make_data(m: &ExperimentManifest, force: bool) -> Result<FewShotDataset> {
    m.validate()?;
    let (data_dir, graph_dir) = (m.data_dir(), m.graph_dir());
    if data_dir.exists() || graph_dir.exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already holds a dataset; pass --force to rebuild it",
                m.out.display()
            )));
        }
        for d in [&data_dir, &graph_dir] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
        }
    }
    let split = load_graph(m)?;
    let dataset = build_fewshot_dataset(&split, &m.dataset_config())?;
    split.save(&graph_dir)?;
    dataset.save(&data_dir)?;
    write_file(&m.out.join("manifest.json"), &m.to_json()?)?;
    info!(
        "wrote {} training and {} evaluation queries to {}",
        dataset.num_train(),
        dataset.eval.values().map(Vec::len).sum::<usize>(),
        data_dir.display()
    );
    Ok(dataset)
}

fn load_inputs(m: &ExperimentManifest) -> Result<(FewShotDataset, GraphMeta)> {
    let data_dir = m.data_dir();
    if !data_dir.exists() {
        return Err(Error::Data(format!(
            "no dataset at {}; run make-data first",
            data_dir.display()
        )));
    }
    let dataset = FewShotDataset::load(&data_dir)?;
    if dataset.setting != m.setting {
        return Err(Error::Config(format!(
            "dataset is {} but the manifest asks for {}",
            dataset.setting, m.setting
        )));
    }
    Ok((dataset, GraphSplit::load(&m.graph_dir())?.meta()))
}

/// Trains the configured algorithm, writing a JSON-lines log and
/// checkpoints every [`CHECKPOINT_EVERY`] steps and at the end. With `resume`,
/// continues from an existing checkpoint of the same configuration.
pub fn cmd_train(m: &ExperimentManifest, resume: bool) -> Result<Checkpoint> {
    m.validate()?;
    let (dataset, meta) = load_inputs(m)?;
    let ckpt_path = m.checkpoint_path();
    let log_path = m.run_dir().join("train.jsonl");
    fs::create_dir_all(m.run_dir()).map_err(|e| Error::io(m.run_dir(), e))?;

    let mut trainer = if resume && ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let same = TrainConfig {
            steps: m.train.steps,
            ..ckpt.config.clone()
        };
        if same != m.train {
            return Err(Error::Config(
                "checkpoint was trained with a different configuration".into(),
            ));
        }
        let mut t = Trainer::resume(&dataset, ckpt)?;
        t.config.steps = m.train.steps;
        t
    } else {
        Trainer::new(&dataset, meta.num_entities, meta.num_relations, m.train.clone())?
    };

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    trainer.run(|t, report| {
        let line = serde_json::to_string(report).map_err(|e| Error::json("training log", e))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if t.step % CHECKPOINT_EVERY == 0 {
            t.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    })?;
    let ckpt = trainer.checkpoint();
    ckpt.save(&ckpt_path)?;
    info!("trained {} steps; checkpoint at {}", trainer.step, ckpt_path.display());
    Ok(ckpt)
}

/// Operator types occurring in the evaluation queries under a scheme.
fn eval_categories(
    dataset: &FewShotDataset,
    scheme: Option<Scheme>,
    depth_cap: u32,
) -> Result<BTreeSet<OperatorTypeKey>> {
    let mut out = BTreeSet::new();
    if scheme.is_some() {
        for q in dataset.eval.values().flatten() {
            out.extend(PreparedQuery::new(q, scheme, depth_cap)?.categories());
        }
    }
    Ok(out)
}

/// Test-time adaptation (when the algorithm calls for it), then per-template MRR.
pub fn evaluate_trained(
    store: &crate::backbone::ParameterStore,
    config: &TrainConfig,
    dataset: &FewShotDataset,
) -> Result<BTreeMap<String, f64>> {
    let train = TrainingSet::new(dataset, config.routing_scheme(), config.depth_cap)?;
    let scheme = config.routing_scheme();
    let categories = eval_categories(dataset, scheme, config.depth_cap)?;
    let names: Vec<String> = dataset.eval.keys().cloned().collect();
    let model = inference_adapt(store, &train, config, &categories, &names)?;
    evaluate_model(&model, &dataset.eval_groups(), config.depth_cap)
}

/// Evaluates a checkpoint and writes `results/<run>.csv` and `.txt`.
pub fn cmd_eval(m: &ExperimentManifest, checkpoint: Option<&Path>, scheme: Option<Scheme>) -> Result<ResultTable> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| m.checkpoint_path());
    let ckpt = Checkpoint::load(&path)?;
    if let Some(s) = scheme {
        if ckpt.config.scheme != Some(s) {
            return Err(Error::Config(format!(
                "checkpoint was trained with scheme {} but {s} was requested",
                ckpt.config.scheme.map_or("none".into(), |x| x.to_string())
            )));
        }
    }
    let (dataset, _) = load_inputs(m)?;
    let mrr = evaluate_trained(&ckpt.store, &ckpt.config, &dataset)?;
    let mut table = ResultTable::new(dataset.setting);
    table.push_row(&row_label(ckpt.config.algorithm, ckpt.config.scheme), &mrr)?;
    let stem = m.out.join("results").join(run_name(&ckpt.config));
    write_file(&stem.with_extension("csv"), &table.to_csv())?;
    write_file(&stem.with_extension("txt"), &table.to_text())?;
    Ok(table)
}

/// Result of a full reproduction run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReproOutcome {
    /// Rows averaged over seeds.
    pub table: ResultTable,
    /// One row per (row, seed), labelled `<row> s<seed>`.
    pub per_seed: ResultTable,
}

/// Synthesizes the graph, builds the dataset, trains every compared
/// algorithm for every seed, evaluates, and writes the comparison tables to
/// `out/repro`.
pub fn cmd_repro(m: &ExperimentManifest) -> Result<ReproOutcome> {
    if m.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    // a configured scheme narrows the MAMO rows to that scheme
    let rows: Vec<_> = repro_rows(m.setting)
        .into_iter()
        .filter(|(a, s)| *a != Algorithm::Mamo || m.train.scheme.is_none() || *s == m.train.scheme)
        .collect();
    for &(algorithm, scheme) in &rows {
        TrainConfig {
            algorithm,
            scheme,
            ..m.train.clone()
        }
        .validate()?;
    }
    let split = load_graph(m)?;
    let dataset = build_fewshot_dataset(&split, &m.dataset_config())?;
    let meta = split.meta();
    let jobs: Vec<(usize, u64)> = (0..rows.len())
        .flat_map(|r| m.seeds.iter().map(move |&s| (r, s)))
        .collect();

    let results = jobs
        .par_iter()
        .map(|&(r, seed)| {
            let (algorithm, scheme) = rows[r];
            let config = TrainConfig {
                algorithm,
                scheme,
                seed,
                ..m.train.clone()
            };
            let mut trainer = Trainer::new(&dataset, meta.num_entities, meta.num_relations, config)?;
            trainer.run(|_, _| Ok(()))?;
            let mrr = evaluate_trained(&trainer.store, &trainer.config, &dataset)?;
            info!("{} seed {seed} done", row_label(algorithm, scheme));
            Ok(mrr)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut table = ResultTable::new(m.setting);
    let mut per_seed = ResultTable::new(m.setting);
    for (r, (algorithm, scheme)) in rows.iter().enumerate() {
        let label = row_label(*algorithm, *scheme);
        let runs: Vec<&BTreeMap<String, f64>> = jobs
            .iter()
            .zip(&results)
            .filter(|((jr, _), _)| *jr == r)
            .map(|(_, mrr)| mrr)
            .collect();
        for (seed, mrr) in m.seeds.iter().zip(&runs) {
            per_seed.push_row(&format!("{label} s{seed}"), mrr)?;
        }
        let mean: BTreeMap<String, f64> = table
            .columns
            .iter()
            .map(|c| {
                (
                    c.clone(),
                    runs.iter().map(|mrr| mrr[c]).sum::<f64>() / runs.len() as f64,
                )
            })
            .collect();
        table.push_row(&label, &mean)?;
    }

    let dir = m.out.join("repro");
    write_file(&dir.join("table.csv"), &table.to_csv())?;
    write_file(&dir.join("table.txt"), &table.to_text())?;
    write_file(&dir.join("per_seed.csv"), &per_seed.to_csv())?;
    write_file(&dir.join("manifest.json"), &m.to_json()?)?;
    Ok(ReproOutcome { table, per_seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(out: &Path) -> ExperimentManifest {
        ExperimentManifest {
            graph: GraphSource::Synthetic(SyntheticParams {
                num_entities: 80,
                num_relations: 3,
                edges_per_relation: 200,
                holdout_fraction: 0.2,
                seed: 1,
            }),
            pool_size_per_type: 500,
            retention_ratio: 0.02,
            eval_queries_per_type: 4,
            train: TrainConfig {
                steps: 3,
                dim: 4,
                ..TrainConfig::default()
            },
            seeds: vec![0],
            out: out.to_path_buf(),
            ..ExperimentManifest::default()
        }
    }

    #[test]
    fn manifest_reads_json_and_toml() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("m.json");
        fs::write(
            &json,
            r#"{"setting": "epfo", "train": {"algorithm": "mamo", "scheme": "BO"}}"#,
        )
        .unwrap();
        let m = ExperimentManifest::load(&json).unwrap();
        assert_eq!(m.setting, Setting::Epfo);
        assert_eq!(m.train.scheme, Some(Scheme::BO));
        let toml_path = dir.path().join("m.toml");
        fs::write(
            &toml_path,
            "setting = \"efo1\"\n[graph.synthetic]\nnum_entities = 50\n[train]\nsteps = 7\n",
        )
        .unwrap();
        let m = ExperimentManifest::load(&toml_path).unwrap();
        assert_eq!(m.train.steps, 7);
        assert_eq!(
            m.graph,
            GraphSource::Synthetic(SyntheticParams {
                num_entities: 50,
                ..Default::default()
            })
        );
        fs::write(&json, r#"{"bogus": 1}"#).unwrap();
        assert_eq!(ExperimentManifest::load(&json).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut m = ExperimentManifest::default();
        m.apply(&Overrides {
            algorithm: Some(Algorithm::Mamo),
            scheme: Some(Scheme::I),
            seed: Some(9),
            ..Overrides::default()
        });
        assert_eq!(run_name(&m.train), "mamo-I-s9");
        assert_eq!(m.seeds, vec![9]);
    }

    #[test]
    fn repro_rows_follow_the_setting() {
        let labels = |s| {
            repro_rows(s)
                .into_iter()
                .map(|(a, sc)| row_label(a, sc))
                .collect::<Vec<_>>()
        };
        assert_eq!(
            labels(Setting::MultiHop),
            ["Vanilla", "MAML", "MAMO(R)", "MAMO(L)", "MAMO(I)", "MAMO(O)"]
        );
        assert_eq!(labels(Setting::Epfo).last().unwrap(), "MAMO(BO)");
        assert_eq!(labels(Setting::Efo1).len(), 8);
    }

    #[test]
    fn repro_scheme_flag_keeps_one_mamo_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small(dir.path());
        m.apply(&Overrides {
            scheme: Some(Scheme::I),
            ..Overrides::default()
        });
        let out = cmd_repro(&m).unwrap();
        let labels: Vec<&str> = out.table.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["Vanilla", "MAML", "MAMO(I)"]);
        assert!(dir.path().join("repro/table.csv").exists());
    }

    #[test]
    fn make_data_refuses_existing_output_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let m = small(dir.path());
        cmd_make_data(&m, false).unwrap();
        let first = fs::read(m.data_dir().join("eval/3p.jsonl")).unwrap();
        assert_eq!(cmd_make_data(&m, false).unwrap_err().exit_code(), 2);
        cmd_make_data(&m, true).unwrap();
        assert_eq!(fs::read(m.data_dir().join("eval/3p.jsonl")).unwrap(), first);
    }

    #[test]
    fn zero_step_checkpoint_is_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small(dir.path());
        m.train.steps = 0;
        cmd_make_data(&m, false).unwrap();
        let ck = cmd_train(&m, false).unwrap();
        let init = crate::backbone::ParameterStore::init(crate::backbone::Dims::new(80, 3, 4), 0);
        assert_eq!(ck.store, init);
    }

    #[test]
    fn eval_rejects_a_mismatched_scheme() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small(dir.path());
        m.train.algorithm = Algorithm::Mamo;
        m.train.scheme = Some(Scheme::O);
        cmd_make_data(&m, false).unwrap();
        cmd_train(&m, false).unwrap();
        assert_eq!(cmd_eval(&m, None, Some(Scheme::I)).unwrap_err().exit_code(), 2);
        let t = cmd_eval(&m, None, Some(Scheme::O)).unwrap();
        assert_eq!(t.columns, ["1p", "2p", "3p", "4p", "5p", "6p"]);
        assert!(m.out.join("results/mamo-O-s0.csv").exists());
    }

    #[test]
    fn train_without_data_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(cmd_train(&small(dir.path()), false).unwrap_err().exit_code(), 3);
    }
}
