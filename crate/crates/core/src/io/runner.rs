//! Subcommands shared by the CLI and its tests. Every run writes the
//! resolved configuration to `<out>/config.txt` and a `summary.json`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{json, Value};

use crate::ann::{AnnNet, AttentionConfig, TinyAttentionNet};
use crate::attacks::{auto_saga, AttackKind, AttackReport};
use crate::convert::{convert_ann_to_snn, fine_tune};
use crate::data::{load_mnist_dir, synth_blobs, Dataset};
use crate::error::{Error, Result};
use crate::harness::{multi_model_comparison, select_eval_set, surrogate_sweep, transfer_matrix, Named};
use crate::io::{Checkpoint, RunConfig};
use crate::model::{Classifier, Model};
use crate::snn::{MlpSpec, SpikingNet};
use crate::train::{evaluate, train_epochs};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Convert,
    Attack,
    SweepSurrogate,
    TransferMatrix,
    MultiAttack,
    Inspect,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Train,
        Command::Convert,
        Command::Attack,
        Command::SweepSurrogate,
        Command::TransferMatrix,
        Command::MultiAttack,
        Command::Inspect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Convert => "convert",
            Command::Attack => "attack",
            Command::SweepSurrogate => "sweep-surrogate",
            Command::TransferMatrix => "transfer-matrix",
            Command::MultiAttack => "multi-attack",
            Command::Inspect => "inspect",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command '{s}'")))
    }
}

/// `blobs:N:C:D` for synthetic Gaussian blobs, otherwise a directory of
/// IDX files.
pub fn load_dataset(spec: &str, seed: u64) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("blobs:") {
        let parts: Vec<usize> = rest
            .split(':')
            .map(|p| p.parse().map_err(|_| Error::Config(format!("dataset: bad blobs spec '{spec}'"))))
            .collect::<Result<_>>()?;
        let [n, c, d] = parts[..] else {
            return Err(Error::Config(format!("dataset: expected blobs:N:C:D, got '{spec}'")));
        };
        return synth_blobs(n, c, d, seed);
    }
    load_mnist_dir(Path::new(spec))
}

/// Deterministic train/test split from `dataset`, `train_fraction` and `seed`.
pub fn load_split(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let seed = cfg.u64("seed")?;
    let data = load_dataset(cfg.get("dataset"), seed)?;
    let first = (data.len() as f64 * cfg.f64("train_fraction")?).round() as usize;
    if first == 0 || first >= data.len() {
        return Err(Error::Config(format!("train_fraction leaves an empty split of {} samples", data.len())));
    }
    data.split(first, seed)
}

/// Fresh model of the configured architecture.
pub fn build_model(cfg: &RunConfig, input_shape: &[usize], classes: usize) -> Result<Model> {
    let seed = cfg.u64("seed")?;
    let inputs: usize = input_shape.iter().product();
    let mut sizes = vec![inputs];
    sizes.extend(cfg.list::<usize>("hidden")?);
    sizes.push(classes);
    Ok(match cfg.get("arch") {
        "snn_mlp" => {
            let mut spec = MlpSpec::new(&sizes, seed);
            spec.input_shape = input_shape.to_vec();
            spec.hidden_neuron = cfg.neuron()?;
            spec.timesteps = cfg.usize("timesteps")?;
            spec.surrogate = cfg.surrogate_spec()?;
            Model::Snn(SpikingNet::mlp(&spec)?)
        }
        "ann_mlp" => Model::Ann(AnnNet::mlp(&sizes, input_shape, seed)?),
        "ann_cnn" => Model::Ann(AnnNet::small_cnn(input_shape, classes, seed)?),
        "attention" => {
            let mut ac = AttentionConfig::new(input_shape, classes);
            ac.patch = cfg.usize("patch")?;
            ac.embed = cfg.usize("embed")?;
            ac.heads = cfg.usize("heads")?;
            ac.layers = cfg.usize("layers")?;
            ac.mlp_hidden = cfg.usize("mlp_hidden")?;
            Model::Attention(TinyAttentionNet::new(ac, seed)?)
        }
        other => return Err(Error::Config(format!("arch: unknown architecture '{other}'"))),
    })
}

/// `name=path` or bare `path` entries of a model list; bare paths are
/// named after the file stem.
pub fn model_refs(list: &[String]) -> Vec<(String, PathBuf)> {
    list.iter()
        .map(|item| match item.split_once('=') {
            Some((n, p)) => (n.trim().to_string(), PathBuf::from(p.trim())),
            None => {
                let p = PathBuf::from(item);
                let name = p.file_stem().map_or_else(|| item.clone(), |s| s.to_string_lossy().into_owned());
                (name, p)
            }
        })
        .collect()
}

fn load_models(cfg: &RunConfig, key: &str) -> Result<Vec<(String, Model)>> {
    let refs = model_refs(&cfg.strings(key));
    if refs.is_empty() {
        return Err(Error::Config(format!("{key}: no model checkpoint given")));
    }
    refs.into_iter()
        .map(|(n, p)| Ok((n, Checkpoint::load(&p)?.model)))
        .collect()
}

fn check_input(model: &dyn Classifier, data: &Dataset) -> Result<()> {
    let want: usize = model.input_shape().iter().product();
    let got: usize = data.sample_shape().iter().product();
    if want != got || model.num_classes() < data.classes {
        return Err(Error::Input(format!(
            "model expects {:?} inputs and {} classes, data has {:?} and {}",
            model.input_shape(),
            model.num_classes(),
            data.sample_shape(),
            data.classes
        )));
    }
    Ok(())
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(out.join(name), contents)?;
    Ok(())
}

/// Run `cmd` and return its summary, which is also written to
/// `<out>/summary.json`. `jobs > 0` bounds the worker threads.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let out = PathBuf::from(cfg.get("out"));
    fs::create_dir_all(&out)?;
    write(&out, "config.txt", cfg.to_text())?;
    let jobs = cfg.usize("jobs")?;
    let body = || match cmd {
        Command::Train => train(cfg, &out),
        Command::Convert => convert(cfg, &out),
        Command::Attack => attack(cfg, &out),
        Command::SweepSurrogate => sweep(cfg, &out),
        Command::TransferMatrix => transfer(cfg, &out),
        Command::MultiAttack => multi(cfg, &out),
        Command::Inspect => inspect(cfg),
    };
    let mut summary = if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("jobs: {e}")))?
            .install(body)?
    } else {
        body()?
    };
    summary["command"] = json!(cmd.name());
    summary["seed"] = json!(cfg.u64("seed")?);
    write(&out, "summary.json", serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn train(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (train, test) = load_split(cfg)?;
    let mut model = build_model(cfg, train.sample_shape(), train.classes)?;
    let tc = cfg.train_config()?;
    let history = train_epochs(&mut model, &train, Some(&test), &tc, |s| {
        log::info!("epoch {} loss {:.4} train {:.4} test {:?}", s.epoch, s.loss, s.train_accuracy, s.test_accuracy);
    })?;
    let acc = evaluate(&model, &test)?.accuracy;
    let mut ckpt = Checkpoint::new(model, tc.seed);
    ckpt.meta = json!({ "arch": cfg.get("arch"), "test_accuracy": acc });
    ckpt.save(&out.join("model.snnm"))?;
    write(out, "history.json", serde_json::to_string_pretty(&history)?)?;
    Ok(json!({ "test_accuracy": acc, "checkpoint": out.join("model.snnm"), "history": history }))
}

fn convert(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (train, test) = load_split(cfg)?;
    let (_, model) = load_models(cfg, "model")?.remove(0);
    let ann = model
        .as_ann()
        .ok_or_else(|| Error::Unsupported(format!("conversion needs an ANN checkpoint, got {}", model.kind().name())))?;
    check_input(ann, &test)?;
    let calib = train.take(cfg.usize("calib_n")?.min(train.len()))?.images;
    let ann_accuracy = evaluate(ann, &test)?.accuracy;
    let mut snn = convert_ann_to_snn(ann, &calib, &cfg.convert_config()?)?;
    let report = fine_tune(&mut snn, &train, Some(&test), &cfg.finetune_config()?)?;
    let mut ckpt = Checkpoint::new(Model::Snn(snn), cfg.u64("seed")?);
    ckpt.meta = json!({ "converted_from": cfg.get("model"), "test_accuracy": report.accuracy_after });
    ckpt.save(&out.join("converted.snnm"))?;
    Ok(json!({
        "ann_accuracy": ann_accuracy,
        "converted_accuracy": report.accuracy_before,
        "finetuned_accuracy": report.accuracy_after,
        "recovery": report.recovery,
        "checkpoint": out.join("converted.snnm"),
    }))
}

fn attack(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (_, test) = load_split(cfg)?;
    let mut owned = load_models(cfg, "models")?;
    if owned.is_empty() {
        owned = load_models(cfg, "model")?;
    }
    let kind = cfg.attack_kind()?;
    let acfg = cfg.attack_config()?;
    let names: Vec<String> = owned.iter().map(|(n, _)| n.clone()).collect();
    let models: Vec<&dyn Classifier> = owned.iter().map(|(_, m)| m.as_classifier()).collect();
    for m in &models {
        check_input(*m, &test)?;
    }
    let evalset = select_eval_set(&models, &test, cfg.usize("eval_n")?, acfg.seed)?;
    let (x, y) = evalset.batch(&test)?;
    let mut extra = json!({});
    let x_adv = if kind == AttackKind::AutoSaga {
        let o = auto_saga(&models, &x, &y, &acfg)?;
        extra = json!({ "final_alpha": mean_final_alpha(&o.alpha), "alpha_resets": o.alpha_resets });
        o.x_adv
    } else {
        kind.run(&models, &x, &y, &acfg)?
    };
    let report = AttackReport::evaluate(&models, &names, &x, &x_adv, &y, acfg.iterations)?;
    write(out, "attack_report.json", serde_json::to_string_pretty(&report)?)?;
    Ok(json!({
        "attack": kind.name(),
        "models": names,
        "n": evalset.len(),
        "success_rate": report.success_rate,
        "joint_success_rate": report.joint_success_rate,
        "max_linf": report.max_linf(),
        "auto_saga": extra,
    }))
}

fn mean_final_alpha(alpha: &[Vec<Vec<f32>>]) -> Vec<f64> {
    let Some(m) = alpha.first().and_then(|h| h.last()).map(Vec::len) else {
        return Vec::new();
    };
    let mut mean = vec![0.0f64; m];
    for hist in alpha {
        for (acc, &a) in mean.iter_mut().zip(hist.last().into_iter().flatten()) {
            *acc += f64::from(a);
        }
    }
    mean.iter().map(|s| s / alpha.len() as f64).collect()
}

fn sweep(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (_, test) = load_split(cfg)?;
    let (_, model) = load_models(cfg, "model")?.remove(0);
    let snn = model
        .as_snn()
        .ok_or_else(|| Error::Unsupported(format!("the surrogate sweep needs an SNN checkpoint, got {}", model.kind().name())))?;
    check_input(snn, &test)?;
    let eps: Vec<f32> = cfg.list("sweep_eps")?;
    let sc = cfg.sweep_config()?;
    let evalset = select_eval_set(&[snn], &test, cfg.usize("eval_n")?, sc.attack.seed)?;
    let grid = surrogate_sweep(snn, &eps, &cfg.sweep_specs()?, &test, &evalset, &sc)?;
    write(out, "sweep.csv", grid.to_csv())?;
    Ok(json!({ "n": grid.n, "eps": grid.eps, "surrogates": grid.surrogates, "robust_accuracy": grid.robust_accuracy }))
}

fn transfer(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (_, test) = load_split(cfg)?;
    let owned = load_models(cfg, "models")?;
    let named: Vec<Named<'_>> = owned.iter().map(|(n, m)| (n.as_str(), m.as_classifier())).collect();
    for (_, m) in &named {
        check_input(*m, &test)?;
    }
    let attacks: Vec<AttackKind> = cfg.list("attacks")?;
    let acfg = cfg.attack_config()?;
    let matrix = transfer_matrix(&named, &attacks, &test, cfg.usize("eval_n")?, &acfg, acfg.seed)?;
    write(out, "transfer.csv", matrix.to_csv())?;
    write(out, "transfer.json", serde_json::to_string_pretty(&matrix)?)?;
    Ok(json!({ "models": matrix.models, "attacks": matrix.attacks, "values": matrix.values, "max": matrix.max }))
}

fn multi(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (_, test) = load_split(cfg)?;
    let owned = load_models(cfg, "models")?;
    if owned.len() < 2 {
        return Err(Error::Config("models: multi-attack needs at least two checkpoints".into()));
    }
    let named: Vec<Named<'_>> = owned.iter().map(|(n, m)| (n.as_str(), m.as_classifier())).collect();
    for (_, m) in &named {
        check_input(*m, &test)?;
    }
    let mut pairs = Vec::new();
    for i in 0..named.len() {
        for j in i + 1..named.len() {
            pairs.push((named[i], named[j]));
        }
    }
    let acfg = cfg.attack_config()?;
    let table = multi_model_comparison(&pairs, &test, cfg.usize("eval_n")?, &acfg, acfg.seed)?;
    write(out, "comparison.csv", table.to_csv())?;
    Ok(serde_json::to_value(&table)?)
}

fn inspect(cfg: &RunConfig) -> Result<Value> {
    let refs = model_refs(&cfg.strings("model"));
    let (name, path) = refs
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config("model: no checkpoint given".into()))?;
    let ckpt = Checkpoint::load(&path)?;
    let params: usize = match &ckpt.model {
        Model::Ann(m) => m.parameters().iter().map(|t| t.len()).sum(),
        Model::Snn(m) => m.parameters().iter().map(|t| t.len()).sum(),
        Model::Attention(m) => m.parameters().iter().map(|t| t.len()).sum(),
    };
    Ok(json!({
        "name": name,
        "kind": ckpt.model.kind().name(),
        "input_shape": ckpt.model.input_shape(),
        "classes": ckpt.model.num_classes(),
        "parameters": params,
        "checkpoint_seed": ckpt.seed,
        "meta": ckpt.meta,
    }))
}
