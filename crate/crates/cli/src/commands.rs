use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steervec_core::data::{
    dominant_confounder, export_dump, import_dump, BiasConfig, GroupedDataset,
};
use steervec_core::eval::{compare, group_accuracies, layer_profile, render_table, DeltaReport};
use steervec_core::experiment::{
    extract, generate_splits, intervention_for, MeansSource, Orientation, SteeringMode,
};
use steervec_core::model::{init_params, ModelConfig, ModelParams};
use steervec_core::numeric::{derive_seed, hex};
use steervec_core::steering::{
    candidates_at, capture_dump, diff_field, diff_in_means, mean_field_from_dump,
    sweep_single_layer, CandidateVector, VectorContent, VectorFile,
};
use steervec_core::train::{load_checkpoint, save_checkpoint, train_erm, TrainReport};
use steervec_core::{Error, EvalReport, Result};

use crate::config::{out_dir, pick, CliConfig};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.stvp";
pub const CANDIDATES: &str = "candidates.stvc";
pub const FIELD: &str = "field.stvc";
pub const CHOSEN: &str = "chosen.stvc";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitInfo {
    pub file: String,
    pub examples: usize,
    pub digest: String,
    pub group_counts: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub root_seed: u64,
    /// Generator settings with the derived data seed filled in.
    pub data: BiasConfig,
    pub balanced_test: bool,
    /// Share of minority-group examples before splitting.
    pub minority_fraction: f64,
    pub train: SplitInfo,
    pub val: SplitInfo,
    pub test: SplitInfo,
}

impl Manifest {
    fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn split_info(&self, split: Split) -> &SplitInfo {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Reads one split and checks it against the recorded digest.
    fn load(&self, dir: &Path, split: Split) -> Result<GroupedDataset> {
        let info = self.split_info(split);
        let ds = GroupedDataset::read_text(
            dir.join(&info.file),
            self.data.n_classes,
            self.data.n_confounders,
        )?;
        if ds.digest() != info.digest {
            return Err(Error::Mismatch(format!(
                "{} does not match the digest in {MANIFEST}",
                info.file
            )));
        }
        Ok(ds)
    }

    fn model_config(&self, cfg: &CliConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.data.vocab_size,
            seq_len: self.data.seq_len,
            n_classes: self.data.n_classes,
            seed: derive_seed(cfg.run.seed, "init"),
            ..cfg.run.model.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn split_info(ds: &GroupedDataset, file: &str) -> SplitInfo {
    SplitInfo {
        file: file.to_string(),
        examples: ds.len(),
        digest: ds.digest(),
        group_counts: ds.group_table.clone(),
    }
}

pub fn gen_data(cfg: &CliConfig) -> Result<PathBuf> {
    cfg.run.validate()?;
    let out = out_dir(cfg)?;
    let splits = generate_splits(&cfg.run)?;
    let data = cfg.run.data_config();
    let total: Vec<usize> = (0..splits.train.n_groups())
        .map(|g| splits.train.group_table[g] + splits.val.group_table[g])
        .collect();
    // The test split may be balanced, so count minorities on the unbalanced part.
    let minority: usize = total
        .iter()
        .enumerate()
        .filter(|&(g, _)| {
            let (y, a) = (g / data.n_confounders, g % data.n_confounders);
            a as u32 != dominant_confounder(y as u32, data.n_confounders)
        })
        .map(|(_, &c)| c)
        .sum();
    for (ds, name) in [
        (&splits.train, "train.txt"),
        (&splits.val, "val.txt"),
        (&splits.test, "test.txt"),
    ] {
        ds.write_text(out.join(name))?;
    }
    let manifest = Manifest {
        root_seed: cfg.run.seed,
        minority_fraction: minority as f64 / total.iter().sum::<usize>() as f64,
        data,
        balanced_test: cfg.run.balanced_test,
        train: split_info(&splits.train, "train.txt"),
        val: split_info(&splits.val, "val.txt"),
        test: split_info(&splits.test, "test.txt"),
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(out)
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    model: &'a ModelConfig,
    model_digest: String,
    train_digest: &'a str,
    val_digest: &'a str,
    report: &'a TrainReport,
}

pub fn train(cfg: &CliConfig, data: &Option<PathBuf>) -> Result<PathBuf> {
    cfg.run.train.validate()?;
    let data_dir = pick(data, &cfg.paths.data, "data directory")?;
    let out = out_dir(cfg)?;
    let manifest = Manifest::read(&data_dir)?;
    let train = manifest.load(&data_dir, Split::Train)?;
    let val = manifest.load(&data_dir, Split::Val)?;
    let model = manifest.model_config(cfg);
    let init = init_params(&model)?;
    let (params, report) = train_erm(&init, &train, &val, &cfg.run.train_config())?;
    save_checkpoint(&params, out.join(CHECKPOINT))?;
    write_json(
        &out.join("train_report.json"),
        &TrainOutput {
            model: &model,
            model_digest: hex(&model.digest()),
            train_digest: &manifest.train.digest,
            val_digest: &manifest.val.digest,
            report: &report,
        },
    )?;
    Ok(out)
}

fn load_model(cfg: &CliConfig, checkpoint: &Option<PathBuf>) -> Result<ModelParams<f32>> {
    load_checkpoint(pick(checkpoint, &cfg.paths.checkpoint, "checkpoint")?)
}

fn save_vectors(
    out: &Path,
    params: &ModelParams<f32>,
    cands: Vec<CandidateVector>,
    field: Vec<f32>,
) -> Result<()> {
    let c = &params.config;
    let digest = c.digest();
    VectorFile {
        config_digest: digest,
        content: VectorContent::Candidates(cands),
    }
    .save(out.join(CANDIDATES))?;
    VectorFile {
        config_digest: digest,
        content: VectorContent::Field {
            n_layers: c.n_layers,
            seq_len: c.seq_len,
            d_model: c.d_model,
            raw: field,
        },
    }
    .save(out.join(FIELD))
}

pub fn extract_vectors(
    cfg: &CliConfig,
    checkpoint: &Option<PathBuf>,
    data: &Option<PathBuf>,
    export: &Option<PathBuf>,
) -> Result<PathBuf> {
    let params = load_model(cfg, checkpoint)?;
    check_steering(cfg, &params.config)?;
    let data_dir = pick(data, &cfg.paths.data, "data directory")?;
    let out = out_dir(cfg)?;
    let manifest = Manifest::read(&data_dir)?;
    let split = match cfg.run.steering.means_from {
        MeansSource::Train => Split::Train,
        MeansSource::Val => Split::Val,
    };
    let ds = manifest.load(&data_dir, split)?;
    let extraction = extract(&params, &ds, &cfg.run.steering)?;
    save_vectors(&out, &params, extraction.candidates, extraction.raw_field)?;
    if let Some(path) = export {
        export_dump(&capture_dump(&params, &ds)?, path)?;
    }
    Ok(out)
}

fn check_steering(cfg: &CliConfig, model: &ModelConfig) -> Result<()> {
    let s = &cfg.run.steering;
    if s.class as usize >= model.n_classes {
        return Err(Error::Config(format!("class {} out of range", s.class)));
    }
    if s.position >= model.seq_len {
        return Err(Error::Config(format!(
            "position {} outside sequence of length {}",
            s.position, model.seq_len
        )));
    }
    Ok(())
}

fn load_vectors(
    cfg: &CliConfig,
    vector: &Option<PathBuf>,
    model: &ModelConfig,
) -> Result<VectorFile> {
    VectorFile::load_for(pick(vector, &cfg.paths.vector, "vector file")?, model)
}

pub fn sweep(
    cfg: &CliConfig,
    checkpoint: &Option<PathBuf>,
    vector: &Option<PathBuf>,
    data: &Option<PathBuf>,
) -> Result<PathBuf> {
    let params = load_model(cfg, checkpoint)?;
    let file = load_vectors(cfg, vector, &params.config)?;
    let data_dir = pick(data, &cfg.paths.data, "data directory")?;
    let out = out_dir(cfg)?;
    let val = Manifest::read(&data_dir)?.load(&data_dir, Split::Val)?;
    let cands = file.content.candidates()?;
    let result = sweep_single_layer(&params, cands, &val)?;
    write_json(&out.join("sweep.json"), &result)?;
    let chosen = cands
        .iter()
        .find(|c| c.layer == result.chosen_layer && c.position == result.chosen_position)
        .expect("sweep picks one of its candidates")
        .clone();
    VectorFile {
        config_digest: file.config_digest,
        content: VectorContent::Candidates(vec![chosen]),
    }
    .save(out.join(CHOSEN))?;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutput {
    pub split: Split,
    pub layer: Option<usize>,
    pub report: EvalReport,
    /// Unsteered report on the same data, present when a steering mode is active.
    pub baseline: Option<EvalReport>,
    pub delta: Option<DeltaReport>,
}

/// Picks the direction from a candidates file: the only non-degenerate one, or `layer`.
fn pick_candidate(file: &VectorFile, layer: Option<usize>) -> Result<CandidateVector> {
    let cands: Vec<&CandidateVector> = file
        .content
        .candidates()?
        .iter()
        .filter(|c| !c.is_degenerate())
        .collect();
    match layer {
        Some(l) => cands
            .into_iter()
            .find(|c| c.layer == l)
            .cloned()
            .ok_or_else(|| Error::Steering(format!("no usable candidate at layer {l}"))),
        None if cands.len() == 1 => Ok(cands[0].clone()),
        None => Err(Error::Config(format!(
            "vector file holds {} usable candidates; choose one with --layer",
            cands.len()
        ))),
    }
}

pub fn eval(
    cfg: &CliConfig,
    checkpoint: &Option<PathBuf>,
    vector: &Option<PathBuf>,
    data: &Option<PathBuf>,
    split: Split,
    layer: Option<usize>,
    mode_given: bool,
) -> Result<PathBuf> {
    let params = load_model(cfg, checkpoint)?;
    let data_dir = pick(data, &cfg.paths.data, "data directory")?;
    let out = out_dir(cfg)?;
    let ds = Manifest::read(&data_dir)?.load(&data_dir, split)?;
    // Without a vector and without an explicit mode this is the baseline row.
    let mode = if !mode_given && vector.is_none() && cfg.paths.vector.is_none() {
        SteeringMode::None
    } else {
        cfg.run.steering.mode
    };
    let (spec, chosen_layer) = match mode {
        SteeringMode::None => (intervention_for(mode, None, None, 0.0)?, None),
        SteeringMode::Full => {
            let field = load_vectors(cfg, vector, &params.config)?
                .content
                .to_field()?;
            (intervention_for(mode, None, Some(&field), 0.0)?, None)
        }
        SteeringMode::Single | SteeringMode::Subtract => {
            let file = load_vectors(cfg, vector, &params.config)?;
            let cand = pick_candidate(&file, layer)?;
            let spec =
                intervention_for(mode, cand.direction.as_ref(), None, cfg.run.steering.alpha)?;
            (spec, Some(cand.layer))
        }
    };
    let report = group_accuracies(&params, &ds, &spec)?;
    let (baseline, delta) = if mode == SteeringMode::None {
        (None, None)
    } else {
        let base = group_accuracies(
            &params,
            &ds,
            &intervention_for(SteeringMode::None, None, None, 0.0)?,
        )?;
        let delta = compare(&base, &report)?;
        (Some(base), Some(delta))
    };

    let name = format!("{split:?}").to_lowercase();
    let mut rows = Vec::new();
    if let Some(b) = &baseline {
        rows.push(b.table_row(&name, "ERM"));
    }
    let method = match (mode, chosen_layer) {
        (SteeringMode::None, _) => "ERM".to_string(),
        (_, Some(l)) => format!("{} (layer {l})", spec.describe()),
        (_, None) => spec.describe(),
    };
    rows.push(report.table_row(&name, &method));
    let mut text = render_table(&rows);
    text.push('\n');
    text.push_str(&report.render());
    if let Some(d) = &delta {
        text.push_str(&d.render());
    }
    fs::write(out.join("eval_report.txt"), text)?;
    write_json(
        &out.join("eval_report.json"),
        &EvalOutput {
            split,
            layer: chosen_layer,
            report,
            baseline,
            delta,
        },
    )?;
    Ok(out)
}

pub fn profile(
    cfg: &CliConfig,
    checkpoint: &Option<PathBuf>,
    vector: &Option<PathBuf>,
    data: &Option<PathBuf>,
    split: Split,
) -> Result<PathBuf> {
    let params = load_model(cfg, checkpoint)?;
    let file = load_vectors(cfg, vector, &params.config)?;
    let data_dir = pick(data, &cfg.paths.data, "data directory")?;
    let out = out_dir(cfg)?;
    let ds = Manifest::read(&data_dir)?.load(&data_dir, split)?;
    let profile = layer_profile(&params, file.content.candidates()?, &ds)?;
    fs::write(out.join("profile.txt"), profile.render())?;
    write_json(&out.join("profile.json"), &profile)?;
    Ok(out)
}

/// Builds candidate and field files from an externally captured activation dump.
pub fn import(
    cfg: &CliConfig,
    dump: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
) -> Result<PathBuf> {
    let params = load_model(cfg, checkpoint)?;
    check_steering(cfg, &params.config)?;
    let dump = import_dump(pick(dump, &cfg.paths.dump, "activation dump")?)?;
    let c = &params.config;
    let [_, l, t, d] = dump.dims;
    if (l, t, d) != (c.n_layers, c.seq_len, c.d_model) {
        return Err(Error::Mismatch(format!(
            "dump holds [{l} × {t} × {d}] activations, checkpoint expects [{} × {} × {}]",
            c.n_layers, c.seq_len, c.d_model
        )));
    }
    let out = out_dir(cfg)?;
    let s = &cfg.run.steering;
    let dominant = dominant_confounder(s.class, cfg.run.data.n_confounders);
    let majority = mean_field_from_dump(&dump, |y, a| y == s.class && a == dominant, "majority")?;
    let minority = mean_field_from_dump(&dump, |y, a| y == s.class && a != dominant, "minority")?;
    let (mu, nu) = match s.orientation {
        Orientation::MajorityMinusMinority => (majority, minority),
        Orientation::MinorityMinusMajority => (minority, majority),
    };
    let cands = candidates_at(&diff_in_means(&mu, &nu)?, s.position);
    save_vectors(&out, &params, cands, diff_field(&mu, &nu)?)?;
    Ok(out)
}
