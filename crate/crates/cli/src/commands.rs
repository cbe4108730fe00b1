use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use pvt_core::config::RunConfig;
use pvt_core::container::{self, Checkpoint, TensorContainer};
use pvt_core::data::read_manifest;
use pvt_core::detector::{detect, TriggerEvent};
use pvt_core::eval::{
    det_curve, read_scores, read_trials, threshold_transfer, write_det_csv, write_scores, CostReport,
    Scorer, SvSystem,
};
use pvt_core::features::{Fbank, SAMPLE_RATE};
use pvt_core::kws_train::{split_train_val, train_kws, TrainReport};
use pvt_core::mdtc::MdtcModel;
use pvt_core::nn::Tensor;
use pvt_core::pipeline::{enroll_speakers, kws_examples, labeled_examples, load_audio, sv_examples};
use pvt_core::sv::{finetune, train_sv, SvConfig, SvModel};
use pvt_core::synthetic::{CorpusConfig, SyntheticCorpus};
use pvt_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::{Command, Common};

/// Parsed configuration plus whether it came from a file, in which case
/// loaded checkpoints must match it.
struct Ctx {
    cfg: RunConfig,
    from_file: bool,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg = cfg.with_seed(seed);
        }
        std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
        Ok(Self {
            cfg,
            from_file: common.config.is_some(),
            out: common.out.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn fbank(&self) -> Result<Fbank> {
        Fbank::new(&self.cfg.features, SAMPLE_RATE)
    }

    fn load_kws(&self, path: &Path) -> Result<MdtcModel> {
        container::load_mdtc(path, self.from_file.then_some(&self.cfg.mdtc))
    }

    /// The class count is set by the training data, so it is taken from
    /// the checkpoint before comparing against the configuration.
    fn load_sv(&self, path: &Path) -> Result<SvModel> {
        if !self.from_file {
            return container::load_sv(path, None);
        }
        let stored: SvConfig = Checkpoint::read(path)?.config()?;
        let expected = SvConfig {
            n_classes: stored.n_classes,
            ..self.cfg.sv.clone()
        };
        container::load_sv(path, Some(&expected))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_report(path: &Path, report: &TrainReport) -> Result<()> {
    report.write_jsonl(path)?;
    if let Some(last) = report.epochs.last() {
        log::info!("trained {} epochs, final loss {:.5}", last.epoch, last.train_loss);
    }
    Ok(())
}

#[derive(Serialize)]
struct EventLine<'a> {
    utt_id: &'a str,
    #[serde(flatten)]
    event: TriggerEvent,
}

#[derive(Serialize)]
struct Transfer {
    threshold: f64,
    cost: f64,
    own_min_cd: f64,
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            common,
            speakers,
            train_positive,
            train_negative,
        } => {
            let ctx = Ctx::new(&common)?;
            let corpus = SyntheticCorpus::generate(&CorpusConfig {
                n_speakers: speakers,
                train_positive,
                train_negative,
                seed: common.seed.unwrap_or(0),
                ..CorpusConfig::default()
            })?;
            corpus.write_to(&ctx.out)
        }
        Command::Features { common, manifest } => {
            let ctx = Ctx::new(&common)?;
            let entries = read_manifest(&manifest)?;
            let audio = load_audio(&entries)?;
            let fbank = ctx.fbank()?;
            let feats: Vec<(String, Tensor<f32>)> = audio
                .par_iter()
                .map(|(id, a)| {
                    let f = fbank.extract(a)?;
                    Ok((id.clone(), Tensor::new(&[f.n_frames(), f.dim()], f.into_vec())?))
                })
                .collect::<Result<_>>()?;
            let mut c = TensorContainer::new();
            c.attributes.insert("kind".into(), "features".into());
            c.attributes
                .insert("config".into(), serde_json::to_string(&ctx.cfg.features)?);
            for (id, t) in feats {
                c.insert(&format!("fbank/{id}"), t)?;
            }
            c.write(ctx.path("features.pvtk"))
        }
        Command::TrainKws { common, manifest } => {
            let ctx = Ctx::new(&common)?;
            let tc = &ctx.cfg.kws_train;
            let entries = read_manifest(&manifest)?;
            let audio = load_audio(&entries)?;
            let fbank = ctx.fbank()?;
            let (train, val) = split_train_val(&entries, tc.val_fraction, tc.seed)?;
            let train = kws_examples(&train, &audio, &fbank, &tc.augment, tc.seed)?;
            let val = labeled_examples(&val, &audio, &fbank)?;
            log::info!("{} training and {} validation examples", train.len(), val.len());
            let mut model = MdtcModel::build(&ctx.cfg.mdtc, tc.seed)?;
            let report = train_kws(&mut model, &train, &val, tc)?;
            write_report(&ctx.path("kws_train.jsonl"), &report)?;
            container::save_mdtc(ctx.path("kws.pvtk"), &model, None)
        }
        Command::TrainSv { common, manifest } => {
            let ctx = Ctx::new(&common)?;
            let entries = read_manifest(&manifest)?;
            let audio = load_audio(&entries)?;
            let (data, speakers) = sv_examples(&entries, &audio, &ctx.fbank()?)?;
            let cfg = SvConfig {
                n_classes: speakers.len(),
                ..ctx.cfg.sv.clone()
            };
            let mut model = SvModel::build(&cfg, cfg.train.seed)?;
            let report = train_sv(&mut model, &data, &cfg.train)?;
            write_report(&ctx.path("sv_train.jsonl"), &report)?;
            write_json(&ctx.path("speakers.json"), &speakers)?;
            container::save_sv(ctx.path("sv.pvtk"), &model, None)
        }
        Command::FinetuneSv {
            common,
            model,
            manifest,
        } => {
            let ctx = Ctx::new(&common)?;
            let mut sv = ctx.load_sv(&model)?;
            let entries = read_manifest(&manifest)?;
            let audio = load_audio(&entries)?;
            let (data, speakers) = sv_examples(&entries, &audio, &ctx.fbank()?)?;
            let report = finetune(&mut sv, &data, &ctx.cfg.sv.finetune, &ctx.cfg.sv.train)?;
            write_report(&ctx.path("finetune.jsonl"), &report)?;
            write_json(&ctx.path("speakers.json"), &speakers)?;
            container::save_sv(ctx.path("sv.pvtk"), &sv, None)
        }
        Command::Detect {
            common,
            model,
            manifest,
        } => {
            let ctx = Ctx::new(&common)?;
            let kws = ctx.load_kws(&model)?;
            let entries = read_manifest(&manifest)?;
            let audio = load_audio(&entries)?;
            let fbank = ctx.fbank()?;
            let events: Vec<TriggerEvent> = entries
                .par_iter()
                .map(|e| {
                    let track = kws.forward(&fbank.extract(&audio[&e.utt_id])?)?;
                    detect(&track, &ctx.cfg.detector)
                })
                .collect::<Result<_>>()?;
            let path = ctx.path("events.jsonl");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
            for (e, event) in entries.iter().zip(events) {
                let line = serde_json::to_string(&EventLine {
                    utt_id: &e.utt_id,
                    event,
                })?;
                writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
            }
            f.flush().map_err(|e| Error::io(&path, e))
        }
        Command::Enroll {
            common,
            model,
            manifest,
        } => {
            let ctx = Ctx::new(&common)?;
            let sv = ctx.load_sv(&model)?;
            let entries = read_manifest(&manifest)?;
            let audio = load_audio(&entries)?;
            let profiles = enroll_speakers(&sv, &ctx.fbank()?, &entries, &audio)?;
            container::save_profiles(ctx.path("profiles.pvtk"), &profiles)
        }
        Command::Score {
            common,
            kws,
            sv,
            profiles,
            trials,
            manifest,
        } => {
            let ctx = Ctx::new(&common)?;
            if sv.len() != profiles.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} --sv models but {} --profiles files",
                    sv.len(),
                    profiles.len()
                )));
            }
            let kws = ctx.load_kws(&kws)?;
            let models: Vec<SvModel> = sv.iter().map(|p| ctx.load_sv(p)).collect::<Result<_>>()?;
            let profiles: Vec<BTreeMap<_, _>> =
                profiles.iter().map(container::load_profiles).collect::<Result<_>>()?;
            let trials = read_trials(&trials)?;
            let audio = load_audio(&read_manifest(&manifest)?)?;
            let fbank = ctx.fbank()?;
            let scorer = Scorer {
                fbank: &fbank,
                kws: &kws,
                detector: &ctx.cfg.detector,
                sv: models
                    .iter()
                    .zip(&profiles)
                    .map(|(model, profiles)| SvSystem { model, profiles })
                    .collect(),
                min_segment_samples: ctx.cfg.eval.min_segment_samples(),
            };
            let scored = scorer.score_trials(&trials, &audio)?;
            write_scores(ctx.path("scores.txt"), &scored)
        }
        Command::Evaluate {
            common,
            trials,
            scores,
            dev_report,
        } => {
            let ctx = Ctx::new(&common)?;
            let trials = read_trials(&trials)?;
            let scores = scores.unwrap_or_else(|| ctx.path("scores.txt"));
            let scored = read_scores(&scores, &trials)?;
            let report = CostReport::new(&scored, ctx.cfg.eval.alpha)?;
            write_det_csv(ctx.path("det.csv"), &det_curve(&scored)?)?;
            report.write_json(ctx.path("cost.json"))?;
            log::info!("minC_d {:.4} at threshold {}", report.min_cd, report.threshold);
            if let Some(dev) = dev_report {
                let dev = CostReport::read_json(&dev)?;
                let cost = threshold_transfer(&dev, &scored)?;
                log::info!("transferred threshold {} gives C_d {cost:.4}", dev.threshold);
                write_json(
                    &ctx.path("transfer.json"),
                    &Transfer {
                        threshold: dev.threshold,
                        cost,
                        own_min_cd: report.min_cd,
                    },
                )?;
            }
            Ok(())
        }
        Command::Rtf {
            common,
            kws,
            sv,
            manifest,
        } => {
            let ctx = Ctx::new(&common)?;
            let kws = ctx.load_kws(&kws)?;
            let sv = ctx.load_sv(&sv)?;
            let entries = read_manifest(&manifest)?;
            let audio = load_audio(&entries)?;
            let fbank = ctx.fbank()?;
            let no_profiles = BTreeMap::new();
            let scorer = Scorer {
                fbank: &fbank,
                kws: &kws,
                detector: &ctx.cfg.detector,
                sv: vec![SvSystem {
                    model: &sv,
                    profiles: &no_profiles,
                }],
                min_segment_samples: ctx.cfg.eval.min_segment_samples(),
            };
            let report = scorer.measure_rtf(entries.iter().map(|e| &audio[&e.utt_id]))?;
            log::info!(
                "KWS RTF {:.4}, SV normalized RTF {:.4}",
                report.kws_rtf,
                report.sv_normalized_rtf
            );
            write_json(&ctx.path("rtf.json"), &report)
        }
    }
}
