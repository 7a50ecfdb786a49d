//! Subcommands behind the `diarkit` binary, the configuration schema and the
//! checkpoint container.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{
    build_model, decode, encode, load_checkpoint, save_checkpoint, Container, DTYPE_F32, DTYPE_F64, MAGIC, VERSION,
};
pub use config::{
    require, Config, ModelConfig, ModelSection, PathsSection, Preset, ResolvedTraining, SimulationSection,
    TrainingSection, Variant,
};
pub use train::{load_training_data, train, TrainOutputs, TrainSession, TrainSummary, TrainingData};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::{infer_session, read_wav};
use crate::score::{compute_der, parse_rttm, read_rttm_file, write_rttm, BucketRule, DerReport, RttmSegment};
use crate::simulate::{build_dataset, mix_seed, read_manifest, ConversationStats};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Parse { .. } => EXIT_CONFIG,
        Error::Io { .. } | Error::Wav { .. } | Error::Checkpoint(_) => EXIT_IO,
        Error::Numerical(_) | Error::Shape { .. } | Error::Contract(_) => EXIT_NUMERICAL,
        Error::Session { source, .. } => exit_code(source),
    }
}

/// Worker count from `--jobs`, capped by `DIARKIT_THREADS` when set.
pub fn worker_count(jobs: Option<usize>, env: Option<&str>) -> Result<usize> {
    let cap = match env {
        Some(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::config("DIARKIT_THREADS", format!("`{v}` is not a positive integer")))?,
        ),
        None => None,
    };
    let jobs = jobs.unwrap_or(1);
    if jobs == 0 {
        return Err(Error::config("--jobs", "must be at least 1"));
    }
    Ok(cap.map_or(jobs, |c| jobs.min(c)))
}

/// Writes the configured splits. Split `k` uses seed `mix(seed, k)`.
pub fn cmd_simulate(cfg: &Config, jobs: usize) -> Result<Vec<(PathBuf, Vec<ConversationStats>)>> {
    let dir = require(&cfg.paths.data_dir, "paths.data_dir")?;
    let sim = &cfg.simulation;
    let spec = sim.dataset_spec();
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for (k, (split, n)) in [
        ("train", sim.train_conversations),
        ("dev", sim.dev_conversations),
        ("test", sim.test_conversations),
    ]
    .into_iter()
    .enumerate()
    {
        if n == 0 {
            continue;
        }
        out.push(build_dataset(dir, split, n, &spec, mix_seed(sim.seed, k as u64 + 1), jobs)?);
    }
    if out.is_empty() {
        return Err(Error::config("simulation.train_conversations", "every split is empty"));
    }
    Ok(out)
}

/// Trains a fresh model from `paths.train_manifest`.
pub fn cmd_train(cfg: &Config, jobs: usize) -> Result<TrainSummary> {
    let manifest = require(&cfg.paths.train_manifest, "paths.train_manifest")?;
    let ckpt = require(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let csv = cfg
        .paths
        .loss_csv
        .clone()
        .unwrap_or_else(|| ckpt.with_extension("loss.csv"));
    let mut model = build_model(cfg, cfg.training.seed)?;
    let data = load_training_data(manifest, &model, &cfg.features, jobs)?;
    train(
        &mut model,
        cfg,
        &data,
        TrainOutputs {
            checkpoint: ckpt,
            loss_csv: &csv,
        },
    )
}

/// `(session, audio, optional reference RTTM)` for a manifest or one WAV file.
fn infer_inputs(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, path.to_path_buf())]);
    }
    Ok(read_manifest(path)?.into_iter().map(|e| (e.session, e.audio)).collect())
}

/// Diarizes `paths.infer_input` with `paths.checkpoint` into `paths.output_rttm`.
/// The architecture comes from the checkpoint; inference settings from `cfg`.
pub fn cmd_infer(cfg: &Config, jobs: usize) -> Result<Vec<RttmSegment>> {
    let ckpt = require(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let input = require(&cfg.paths.infer_input, "paths.infer_input")?;
    let output = require(&cfg.paths.output_rttm, "paths.output_rttm")?;
    let (model, trained) = load_checkpoint(ckpt)?;
    if trained.model.variant != cfg.model.variant {
        return Err(Error::config(
            "model.variant",
            format!(
                "checkpoint holds a {:?} model, config asks for {:?}",
                trained.model.variant, cfg.model.variant
            ),
        ));
    }
    let needs_profiles = !cfg.model.variant.is_eda() && !cfg.inference.first_pass;
    let profiles = match (&cfg.paths.profile_rttm, needs_profiles) {
        (Some(p), true) => Some(read_rttm_file(p)?),
        (None, true) => {
            return Err(Error::config(
                "paths.profile_rttm",
                "TS-VAD inference without the first pass needs profile segments",
            ))
        }
        _ => None,
    };
    let sessions = infer_inputs(input)?;
    let results = crate::parallel_map(sessions.len(), jobs, |i| -> Result<Vec<RttmSegment>> {
        let (name, audio_path) = &sessions[i];
        let audio = read_wav(audio_path, cfg.features.sample_rate)?;
        let oracle: Option<Vec<RttmSegment>> = profiles
            .as_ref()
            .map(|p| p.iter().filter(|s| &s.session == name).cloned().collect());
        infer_session(name, &audio, &model, &cfg.features, &cfg.inference, oracle.as_deref())
    });
    let mut all = Vec::new();
    for r in results {
        all.extend(r?);
    }
    std::fs::write(output, write_rttm(&all)).map_err(|e| Error::io(output, e))?;
    Ok(all)
}

/// Reference segments from an RTTM file or from every RTTM of a manifest.
pub fn read_reference(path: &Path) -> Result<Vec<RttmSegment>> {
    if path.extension().is_some_and(|e| e == "tsv") {
        let mut all = Vec::new();
        for e in read_manifest(path)? {
            all.extend(read_rttm_file(&e.rttm)?.into_iter().filter(|s| s.session == e.session));
        }
        return Ok(all);
    }
    read_rttm_file(path)
}

/// Scores `paths.output_rttm` against `paths.reference`; writes the JSON
/// report to `paths.report` when set.
pub fn cmd_score(cfg: &Config) -> Result<DerReport> {
    let reference = read_reference(require(&cfg.paths.reference, "paths.reference")?)?;
    let hyp_path = require(&cfg.paths.output_rttm, "paths.output_rttm")?;
    let text = std::fs::read_to_string(hyp_path).map_err(|e| Error::io(hyp_path, e))?;
    let hypothesis = parse_rttm(&text).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", hyp_path.display()),
        },
        e => e,
    })?;
    let rule = BucketRule::parse(&cfg.inference.buckets)?;
    let report = compute_der(&reference, &hypothesis, cfg.inference.collar, &rule)?;
    if let Some(p) = &cfg.paths.report {
        std::fs::write(p, report.to_json()).map_err(|e| Error::io(p, e))?;
    }
    Ok(report)
}

/// Quick internal consistency checks; returns `(name, passed, detail)`.
pub fn selftest() -> Vec<(String, bool, String)> {
    let mut out = Vec::new();
    let mut check = |name: &str, r: Result<(bool, String)>| {
        let (ok, detail) = r.unwrap_or_else(|e| (false, e.to_string()));
        out.push((name.to_string(), ok, detail));
    };
    check("gradient of a toy TS-VAD model", selftest_grad());
    check("scorer on a constructed case", selftest_score());
    check("assignment solver", selftest_hungarian());
    check("median filter idempotence", selftest_median());
    check("checkpoint round trip", selftest_checkpoint());
    out
}

fn selftest_grad() -> Result<(bool, String)> {
    use crate::tensor::{grad_check_with, Tensor};
    use crate::tsvad::{JsdKind, TsVadConfig, TsVadModel};
    let mut c = TsVadConfig::toy(JsdKind::BlstmTimeTransSpk);
    c.frontend.input_dim = 6;
    c.frontend.channels = 4;
    c.frontend.embed_dim = 4;
    c.isd = crate::tsvad::IsdConfig {
        embed_dim: 4,
        profile_dim: 4,
        proj: 4,
        hidden: 3,
        out: 4,
    };
    c.jsd.blocks = 1;
    c.jsd.blstm_hidden = 3;
    c.jsd.blstm_proj = 4;
    c.jsd.heads = 2;
    c.jsd.ff_dim = 4;
    let model = TsVadModel::new(c, 3)?;
    let x = Tensor::new(&[16, 6], (0..96).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect())?;
    let p = Tensor::new(&[2, 4], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.0, 0.6])?;
    let err = grad_check_with(
        Some(&model.params),
        |g, xv| {
            let pv = g.input(p.clone());
            let y = model.forward(g, xv, pv)?;
            Ok(g.sum(y))
        },
        &x,
        1e-6,
    )?;
    Ok((err < 1e-4, format!("max relative error {err:.2e}")))
}

fn selftest_score() -> Result<(bool, String)> {
    let r = parse_rttm("SPEAKER s 1 0.000 10.000 <NA> <NA> A <NA> <NA>\n")?;
    let h = parse_rttm("SPEAKER s 1 0.000 9.000 <NA> <NA> A <NA> <NA>\n")?;
    let rep = compute_der(&r, &h, 0.25, &BucketRule::default())?;
    let der = rep.der() * 100.0;
    Ok(((der - 0.75 / 9.5 * 100.0).abs() < 1e-9, format!("DER {der:.3}%")))
}

fn selftest_hungarian() -> Result<(bool, String)> {
    let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
    let a = crate::eda::hungarian(&cost)?;
    let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((total == 5.0, format!("cost {total}")))
}

fn selftest_median() -> Result<(bool, String)> {
    use crate::pipeline::median_filter;
    use crate::tensor::Tensor;
    for bits in 0u32..1 << 10 {
        let x = Tensor::new(&[10, 1], (0..10).map(|i| ((bits >> i) & 1) as f64).collect())?;
        let y = median_filter(&x, 3)?;
        if median_filter(&y, 3)? != y {
            return Ok((false, format!("pattern {bits:010b}")));
        }
    }
    Ok((true, "1024 patterns".into()))
}

fn selftest_checkpoint() -> Result<(bool, String)> {
    let mut cfg = Config::default();
    cfg.model.preset = Preset::Toy;
    let mut model = build_model(&cfg, 1)?;
    model.params_mut().round_to_f32();
    let entries: Vec<(&str, &crate::tensor::Tensor)> =
        model.params().iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    let bytes = encode(&cfg.to_toml()?, &entries);
    let c = decode(&bytes)?;
    let same = c.entries.len() == entries.len() && c.entries.iter().zip(&entries).all(|(a, b)| a.0 == b.0 && &a.1 == b.1);
    Ok((same, format!("{} bytes", bytes.len())))
}

/// Session-level DER lines for a report, used by the binary.
pub fn per_session_lines(report: &DerReport) -> BTreeMap<String, String> {
    report
        .per_session
        .iter()
        .map(|(k, s)| {
            let der = s.components.der().map_or("n/a".to_string(), |d| format!("{:.2}%", d * 100.0));
            (k.clone(), der)
        })
        .collect()
}
