//! End-to-end experiment: shared data, then one pipeline per channel.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! resolved_config.json
//! manifest.json
//! <channel>/channel_params.csv
//! <channel>/drift_report.csv
//! <channel>/eer_table.csv          rows O, P, A, then one per attack
//! <channel>/scores_<row>.csv       one per eer_table row
//! <channel>/history_<attack>.csv   learned attacks only
//! <channel>/projection.csv
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use driftlab_core::anonymizer::{anonymize_corpus, passthrough_corpus};
use driftlab_core::attacks::{AttackKind, AttackSeeds, AttackSetup};
use driftlab_core::channel::{make_channel, write_params_csv, ChannelModel};
use driftlab_core::corpus::{
    build_protocol, generate_corpus, generate_pool, Corpus, Domain, Pool, TrialProtocol,
};
use driftlab_core::evaluation::{
    drift_target_stats, project_2d, score_domains, write_drift_report_csv, write_eer_table_csv,
    write_projection_csv, write_scores_csv, DriftReport, EerRow, ProjectedPoint, TrialScores,
};
use driftlab_core::neuralnet::{write_history_csv, HistoryRow};
use driftlab_core::rng::derive_seed;
use rayon::prelude::*;

use crate::config::{ChannelSection, ExperimentConfig};
use crate::error::CliError;
use crate::manifest::{sha256_hex, write_manifest, Manifest};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "DRIFTLAB_THREADS";

/// Data shared by every channel.
pub struct SharedData {
    pub eval: Corpus,
    pub attacker: Corpus,
    pub pool: Pool,
    pub attacker_pool: Pool,
    pub protocol: TrialProtocol,
    /// Evaluation corpus after the defender's anonymizer, before any channel.
    pub anonymized: Corpus,
}

/// One attack outcome within a channel.
#[derive(Clone, Debug)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub scores: TrialScores,
    pub history: Option<Vec<HistoryRow>>,
    pub best_val_loss: Option<f64>,
}

/// Everything computed for one channel.
#[derive(Clone, Debug)]
pub struct ChannelReport {
    pub name: String,
    pub params: ChannelModel,
    pub drift: DriftReport,
    /// Scores with enrollment and trials in the same domain, in O, P, A order.
    pub domains: Vec<(Domain, TrialScores)>,
    pub attacks: Vec<AttackReport>,
    pub projection: Vec<ProjectedPoint>,
}

impl ChannelReport {
    pub fn eer_rows(&self) -> Result<Vec<EerRow>, CliError> {
        let stage = |source| CliError::Stage {
            stage: "eer",
            channel: self.name.clone(),
            source,
        };
        let mut rows = Vec::new();
        for (d, s) in &self.domains {
            rows.push(EerRow {
                evaluation: d.tag().to_string(),
                result: s.eer().map_err(stage)?,
            });
        }
        for a in &self.attacks {
            rows.push(EerRow {
                evaluation: a.kind.name().to_string(),
                result: a.scores.eer().map_err(stage)?,
            });
        }
        Ok(rows)
    }

    /// EER (fraction) of a row of [`Self::eer_rows`] by its name.
    pub fn eer(&self, evaluation: &str) -> Option<f64> {
        let rows = self.eer_rows().ok()?;
        rows.into_iter()
            .find(|r| r.evaluation == evaluation)
            .map(|r| r.result.eer)
    }
}

/// Result of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub config_digest: String,
    pub channels: Vec<ChannelReport>,
    pub manifest: Manifest,
}

/// Runs `f` on a pool sized by [`THREADS_ENV`] when set.
pub fn with_thread_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize =
            v.trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Validation {
                    field: THREADS_ENV.into(),
                    message: format!("must be a positive integer, got `{v}`"),
                })?;
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn shared_stage(stage: &'static str) -> impl Fn(driftlab_core::error::Error) -> CliError {
    move |source| CliError::Stage {
        stage,
        channel: "*".into(),
        source,
    }
}

pub fn build_shared(cfg: &ExperimentConfig) -> Result<SharedData, CliError> {
    let eval = generate_corpus(&cfg.eval_corpus()).map_err(shared_stage("corpus"))?;
    let attacker =
        generate_corpus(&cfg.attacker_corpus()).map_err(shared_stage("attacker_corpus"))?;
    let dim = cfg.corpus.dim;
    let pool = generate_pool(cfg.pool.size, dim, derive_seed(cfg.seed, "pool"))
        .map_err(shared_stage("pool"))?;
    let attacker_pool = if cfg.pool.disjoint_attacker_pool {
        generate_pool(cfg.pool.size, dim, derive_seed(cfg.seed, "pool:attacker"))
            .map_err(shared_stage("pool"))?
    } else {
        pool.clone()
    };
    let protocol = build_protocol(
        &eval,
        cfg.protocol.enroll_per_speaker,
        cfg.protocol.nontarget_per_trial,
        derive_seed(cfg.seed, "protocol"),
    )
    .map_err(shared_stage("protocol"))?;
    let anonymized = match cfg.anonymizer_config(derive_seed(cfg.seed, "anonymizer:defender")) {
        Some(a) => anonymize_corpus(&eval, &pool, &a).map_err(shared_stage("anonymize"))?,
        None => passthrough_corpus(&eval),
    };
    Ok(SharedData {
        eval,
        attacker,
        pool,
        attacker_pool,
        protocol,
        anonymized,
    })
}

/// Seeds of one channel's attacks. Anonymizer seeds are shared across
/// channels; noise and training seeds follow the channel.
pub fn attack_seeds(cfg: &ExperimentConfig, ch: &ChannelSection) -> AttackSeeds {
    let spec = cfg.channel_spec(ch);
    let tag = |t: &str| derive_seed(cfg.seed, &format!("channel:{}:{t}", ch.name));
    AttackSeeds {
        defender_anonymizer: derive_seed(cfg.seed, "anonymizer:defender"),
        defender_noise: derive_seed(spec.seed, "noise:defender"),
        attacker_anonymizer: derive_seed(cfg.seed, "anonymizer:attacker"),
        attacker_noise: derive_seed(spec.seed, "noise:attacker"),
        model_init: tag("model_init"),
        train_shuffle: tag("train_shuffle"),
    }
}

/// Computes every result for one channel without touching the filesystem.
pub fn run_channel(
    cfg: &ExperimentConfig,
    shared: &SharedData,
    ch: &ChannelSection,
    config_digest: &str,
) -> Result<ChannelReport, CliError> {
    let stage = |stage: &'static str| {
        move |source| CliError::Stage {
            stage,
            channel: ch.name.clone(),
            source,
        }
    };
    let channel = make_channel(cfg.channel_spec(ch)).map_err(stage("channel"))?;
    let seeds = attack_seeds(cfg, ch);
    let channeled = channel
        .apply_to_corpus(&shared.anonymized, seeds.defender_noise)
        .map_err(stage("channel"))?;
    let drift = drift_target_stats(&channeled).map_err(stage("drift_report"))?;
    let domains = Domain::ALL
        .iter()
        .map(|&d| Ok((d, score_domains(&shared.protocol, &channeled, d, d)?)))
        .collect::<driftlab_core::error::Result<Vec<_>>>()
        .map_err(stage("domain_scoring"))?;

    let setup = AttackSetup {
        eval: shared.eval.clone(),
        protocol: shared.protocol.clone(),
        attacker_train: shared.attacker.clone(),
        pool: shared.pool.clone(),
        attacker_pool: shared.attacker_pool.clone(),
        anonymizer: cfg.anonymizer_config(0),
        channel: channel.clone(),
        seeds,
        learned: cfg.learned_attack_config(),
        config_digest: config_digest.to_string(),
    };
    let attacks = if cfg.attacks.is_empty() {
        Vec::new()
    } else {
        let data = setup.prepare().map_err(stage("attack_data"))?;
        cfg.attacks
            .par_iter()
            .map(|&a| {
                let kind = AttackKind::from(a);
                let r = setup.run(kind, &data).map_err(|source| CliError::Stage {
                    stage: kind.name(),
                    channel: ch.name.clone(),
                    source,
                })?;
                Ok(AttackReport {
                    kind,
                    scores: r.scores,
                    history: r.history,
                    best_val_loss: r.best_val_loss,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?
    };

    let projection = if cfg.projection.speakers == 0 {
        Vec::new()
    } else {
        let chosen: Vec<_> = channeled
            .speaker_ids()
            .into_iter()
            .take(cfg.projection.speakers)
            .collect();
        let mut points = Vec::new();
        for d in Domain::ALL {
            for u in channeled
                .utterances
                .iter()
                .filter(|u| chosen.contains(&u.spk))
            {
                if let Some(x) = u.embedding(d) {
                    points.push((x.clone(), d.tag().to_string(), u.spk));
                }
            }
        }
        project_2d(&points).map_err(stage("projection"))?
    };

    Ok(ChannelReport {
        name: ch.name.clone(),
        params: channel,
        drift,
        domains,
        attacks,
        projection,
    })
}

fn write_file(
    dir: &Path,
    name: &str,
    channel: &str,
    f: impl FnOnce(&mut BufWriter<File>) -> driftlab_core::error::Result<()>,
) -> Result<(), CliError> {
    let path = dir.join(name);
    let file =
        File::create(&path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|source| CliError::Stage {
        stage: "write",
        channel: channel.to_string(),
        source,
    })?;
    w.flush()
        .map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Writes one channel's files into `dir`, which must exist.
pub fn write_channel(report: &ChannelReport, dir: &Path) -> Result<(), CliError> {
    let ch = report.name.as_str();
    write_file(dir, "channel_params.csv", ch, |w| {
        write_params_csv(&report.params, w)
    })?;
    write_file(dir, "drift_report.csv", ch, |w| {
        write_drift_report_csv(&report.drift, w)
    })?;
    let rows = report.eer_rows()?;
    write_file(dir, "eer_table.csv", ch, |w| write_eer_table_csv(&rows, w))?;
    for (d, s) in &report.domains {
        write_file(dir, &format!("scores_{}.csv", d.tag()), ch, |w| {
            write_scores_csv(s, w)
        })?;
    }
    for a in &report.attacks {
        write_file(dir, &format!("scores_{}.csv", a.kind.name()), ch, |w| {
            write_scores_csv(&a.scores, w)
        })?;
        if let Some(h) = &a.history {
            write_file(dir, &format!("history_{}.csv", a.kind.name()), ch, |w| {
                write_history_csv(h, w)
            })?;
        }
    }
    write_file(dir, "projection.csv", ch, |w| {
        write_projection_csv(&report.projection, w)
    })
}

fn remove_dir_if_present(path: &Path) -> Result<(), CliError> {
    match fs::remove_dir_all(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(CliError::io(format!("removing {}", path.display()), e)),
    }
}

/// Builds the channel directory next to its destination, then renames it
/// into place.
fn publish_channel(report: &ChannelReport, out: &Path) -> Result<(), CliError> {
    let tmp = out.join(format!(".{}.tmp-{}", report.name, std::process::id()));
    remove_dir_if_present(&tmp)?;
    fs::create_dir_all(&tmp).map_err(|e| CliError::io(format!("creating {}", tmp.display()), e))?;
    if let Err(e) = write_channel(report, &tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    let dest = out.join(&report.name);
    remove_dir_if_present(&dest)?;
    fs::rename(&tmp, &dest)
        .map_err(|e| CliError::io(format!("renaming into {}", dest.display()), e))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(format!("renaming into {}", path.display()), e))
}

/// Validates `cfg`, runs every channel and writes all artifacts under
/// `cfg.output_dir`. Nothing is written when validation fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, CliError> {
    let cfg = cfg.clone().resolve();
    cfg.validate()?;
    let config_json = cfg.to_json();
    let config_digest = sha256_hex(config_json.as_bytes());

    let shared = with_thread_pool(|| build_shared(&cfg))??;
    let channels = with_thread_pool(|| {
        cfg.channels
            .par_iter()
            .map(|ch| run_channel(&cfg, &shared, ch, &config_digest))
            .collect::<Result<Vec<_>, CliError>>()
    })??;

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::io(format!("creating {}", out.display()), e))?;
    write_atomic(&out.join("resolved_config.json"), config_json.as_bytes())?;
    for report in &channels {
        publish_channel(report, out)?;
    }
    let mut files = vec!["resolved_config.json".to_string()];
    for ch in &cfg.channels {
        let mut names: Vec<String> = fs::read_dir(out.join(&ch.name))
            .map_err(|e| CliError::io(format!("listing {}", out.join(&ch.name).display()), e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .map(|n| format!("{}/{n}", ch.name))
            .collect();
        files.append(&mut names);
    }
    let manifest = Manifest::build(out, config_digest.clone(), files)?;
    write_manifest(&manifest, out)?;
    Ok(RunSummary {
        config_digest,
        channels,
        manifest,
    })
}
