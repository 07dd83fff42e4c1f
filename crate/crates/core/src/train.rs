//! Experiment runner: baseline, modality dropout and preference-aware
//! self-distillation training, followed by evaluation on every modality
//! subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, ExperimentConfig, Grouping, Method, Toggles};
use crate::data::{apply_presence, generate_dataset, load_container, MultiModalSample};
use crate::error::{Error, Result};
use crate::losses::{
    compute_prototypes, dice_plus_weighted_ce, dice_plus_weighted_ce_grad, knowledge_gap,
    pixel_distill_grad, proto_distill_grad, seg_loss_grad, similarity_field,
};
use crate::metrics::{evaluate_combinations, nested_groups, plain_groups, EvalOptions, EvalReport};
use crate::nn::{checkpoint, Backbone, BackboneConfig, ForwardPass, PyramidGrads};
use crate::optim::{poly_lr, AdamW};
use crate::plot::{emit_rp_plot, rp_log_csv, RpLogRow};
use crate::preference::{relative_preference, total_loss, PreferenceState, SamplePreference};
use crate::presence::{sample_presence, MissingRateVector, PresenceManifest, PresenceMatrix};

/// Set to `0` to mix OS entropy into the shuffling, dropout and
/// augmentation stream. Any other value, or unset, keeps runs bitwise
/// reproducible from the config seed.
pub const DETERMINISTIC_ENV: &str = "PASSION_DETERMINISTIC";

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).map_or(true, |v| v.trim() != "0")
}

/// Per-step losses, all measured on the same forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub total: f64,
    pub seg: f64,
    /// Sum of the uni-modal output-level segmentation losses, measured for
    /// every method.
    pub reg_sum: f64,
}

/// Loss of one training step together with its logit gradients.
pub struct StepLoss {
    pub trace: StepTrace,
    pub grads: PyramidGrads,
    pub pref: SamplePreference,
}

/// Knowledge gap of each available uni-modal pathway to the fused one,
/// with both sides treated as fixed measurements.
pub fn measure_gaps(pass: &ForwardPass, label: &[u8]) -> Result<BTreeMap<usize, f64>> {
    let fused = &pass.pyramid.fused_logits[0];
    let teacher = similarity_field(fused, &compute_prototypes(fused, label)?)?;
    let mut gaps = BTreeMap::new();
    for &m in &pass.pyramid.present {
        let z = &pass.pyramid.uni_logits[&m];
        let student = similarity_field(z, &compute_prototypes(z, label)?)?;
        gaps.insert(m, knowledge_gap(&student, &teacher)?);
    }
    Ok(gaps)
}

/// Drops each available modality with probability 0.5; if nothing
/// survives, one of the available modalities is restored at random.
pub fn moddrop_row<R: Rng>(presence: &[u8], rng: &mut R) -> Vec<u8> {
    let mut row: Vec<u8> = presence.iter().map(|&p| u8::from(p == 1 && rng.gen_bool(0.5))).collect();
    if row.iter().all(|&v| v == 0) {
        let avail: Vec<usize> = (0..presence.len()).filter(|&m| presence[m] == 1).collect();
        if let Some(&m) = avail.choose(rng) {
            row[m] = 1;
        }
    }
    row
}

/// Hyperparameters a loss assembly needs.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Builds the method's loss for one forward pass. `beta` holds the current
/// coefficients; the caller decides whether they are ever updated.
pub fn build_method_loss(
    method: Method,
    toggles: Toggles,
    weights: LossWeights,
    model: &Backbone,
    pass: &ForwardPass,
    sample: &MultiModalSample,
    beta: &[f64],
) -> Result<StepLoss> {
    let cfg = model.config();
    let pyr = &pass.pyramid;
    let label = &sample.label;
    let (seg, seg_grads) = seg_loss_grad(&pyr.fused_logits, label, sample.shape, cfg.upsample)?;
    let mut grads = PyramidGrads::new(cfg.depth);
    for (l, g) in seg_grads.into_iter().enumerate() {
        grads.add_fused(l, g);
    }

    let mut reg = BTreeMap::new();
    for &m in &pyr.present {
        let z = &pyr.uni_logits[&m];
        if method == Method::Passion {
            reg.insert(m, dice_plus_weighted_ce(z, label)?);
        } else {
            let (v, g) = dice_plus_weighted_ce_grad(z, label)?;
            grads.add_uni(m, 0, g);
            reg.insert(m, v);
        }
    }
    let reg_sum: f64 = reg.values().sum();

    let pref = relative_preference(&measure_gaps(pass, label)?, cfg.n_modalities)?;

    let total = match method {
        Method::Baseline | Method::ModDrop => seg + reg_sum,
        Method::Passion => {
            let mut pixel = BTreeMap::new();
            let mut proto = BTreeMap::new();
            let mut delta = vec![0u8; cfg.n_modalities];
            let fused = &pyr.fused_logits[0];
            let teacher = if toggles.proto {
                Some(similarity_field(fused, &compute_prototypes(fused, label)?)?)
            } else {
                None
            };
            for &m in &pyr.present {
                if toggles.pixel {
                    let student = pyr.uni_pyramid(m).ok_or_else(|| {
                        Error::InvalidArgument("pixel distillation needs uni-modal pyramids".into())
                    })?;
                    let (v, g) = pixel_distill_grad(student, &pyr.fused_logits, weights.tau)?;
                    let w = weights.lambda1 * beta[m];
                    for (l, mut gl) in g.into_iter().enumerate() {
                        gl.scale(w);
                        grads.add_uni(m, l, gl);
                    }
                    pixel.insert(m, v);
                } else {
                    pixel.insert(m, 0.0);
                }
                if let Some(teacher) = &teacher {
                    let on = if toggles.delta { pref.delta[m] == 1 } else { true };
                    if on {
                        let (v, mut g) = proto_distill_grad(&pyr.uni_logits[&m], label, teacher)?;
                        g.scale(weights.lambda2);
                        grads.add_uni(m, 0, g);
                        proto.insert(m, v);
                        delta[m] = 1;
                    }
                }
            }
            total_loss(seg, &pixel, &proto, &delta, beta, weights.lambda1, weights.lambda2)?
        }
    };
    Ok(StepLoss {
        trace: StepTrace { total, seg, reg_sum },
        grads,
        pref,
    })
}

fn augment<R: Rng>(sample: &mut MultiModalSample, flip: bool, intensity: f64, rng: &mut R) {
    if flip && rng.gen_bool(0.5) {
        let sp = sample.shape;
        let rows = sp.volume() / sp.w;
        for r in 0..rows {
            sample.label[r * sp.w..(r + 1) * sp.w].reverse();
        }
        for img in sample.images.iter_mut().flatten() {
            for r in 0..rows {
                img[r * sp.w..(r + 1) * sp.w].reverse();
            }
        }
    }
    if intensity > 0.0 {
        for img in sample.images.iter_mut().flatten() {
            let s = 1.0 + rng.gen_range(-intensity..=intensity);
            img.iter_mut().for_each(|v| *v *= s as f32);
        }
    }
}

/// Training and test data plus the training presence matrix.
pub struct PreparedData {
    pub train: Vec<MultiModalSample>,
    pub test: Vec<MultiModalSample>,
    pub presence: PresenceManifest,
    pub n_classes: usize,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train_full, test, n_classes) = match &cfg.data {
        DataSource::Synthetic { train, test_samples } => {
            let mut test_spec = train.clone();
            test_spec.n_samples = *test_samples;
            test_spec.seed = train.seed ^ 0x7e57_5e7_u64.rotate_left(17);
            (generate_dataset(train)?, generate_dataset(&test_spec)?, train.n_classes)
        }
        DataSource::Files { train, test } => {
            let (h, tr) = load_container(train)?;
            let (ht, te) = load_container(test)?;
            if h.n_modalities != ht.n_modalities || h.n_classes != ht.n_classes {
                return Err(Error::Config("train and test containers disagree on M or K".into()));
            }
            (tr, te, h.n_classes)
        }
    };
    let m = train_full.first().map(MultiModalSample::n_modalities).unwrap_or(0);
    if train_full.is_empty() || test.is_empty() {
        return Err(Error::Config("empty training or test set".into()));
    }
    if m != cfg.targets.len() {
        return Err(Error::Config(format!(
            "{} missing-rate targets for data with {m} modalities",
            cfg.targets.len()
        )));
    }
    if test.iter().any(|s| s.available().len() != m) {
        return Err(Error::Config("test samples must have every modality".into()));
    }
    let targets = MissingRateVector::new(cfg.targets.clone())?;
    // A container that already lacks modalities carries its own presence.
    let incomplete = train_full.iter().any(|s| s.available().len() != m);
    let presence = if incomplete {
        let rows: Vec<Vec<u8>> = train_full.iter().map(|s| s.presence.clone()).collect();
        PresenceManifest {
            seed: cfg.seed,
            targets: cfg.targets.clone(),
            matrix: PresenceMatrix::from_rows(&rows)?,
        }
    } else {
        let draw = sample_presence(&targets, train_full.len(), cfg.seed)?;
        if draw.repairs > 0 {
            log::info!("presence sampling repaired {} all-missing rows", draw.repairs);
        }
        PresenceManifest {
            seed: cfg.seed,
            targets: cfg.targets.clone(),
            matrix: draw.matrix,
        }
    };
    let train = train_full
        .iter()
        .enumerate()
        .map(|(n, s)| {
            if incomplete {
                Ok(s.clone())
            } else {
                apply_presence(s, presence.matrix.row(n))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData {
        train,
        test,
        presence,
        n_classes,
    })
}

pub struct TrainOutcome {
    pub model: Backbone,
    pub trace: Vec<StepTrace>,
    pub rp_log: Vec<RpLogRow>,
    pub final_beta: Vec<f64>,
}

pub fn backbone_config(cfg: &ExperimentConfig, data: &PreparedData) -> BackboneConfig {
    let m = data.presence.matrix.n_modalities();
    let rank = data.train[0].shape.rank();
    BackboneConfig {
        n_modalities: m,
        n_classes: data.n_classes,
        width: cfg.model.width,
        depth: cfg.model.depth,
        rank,
        fusion: cfg.model.fusion,
        upsample: cfg.model.upsample,
    }
}

/// The training loop alone, in memory.
pub fn train(cfg: &ExperimentConfig, data: &PreparedData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Backbone::new(backbone_config(cfg, data), cfg.seed)?;
    let rates = data.presence.matrix.missing_rates()?;
    let mut state = PreferenceState::new(&rates, cfg.gamma);
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);
    let mut stream_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
    if !deterministic_mode() {
        stream_seed ^= rand::random::<u64>();
        log::warn!("{DETERMINISTIC_ENV}=0: run is not reproducible");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let weights = LossWeights {
        tau: cfg.tau,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
    };
    let need_uni = cfg.method == Method::Passion && cfg.toggles.pixel;
    let n = data.train.len();
    let total_steps = cfg.epochs * n;
    let mut trace = Vec::with_capacity(total_steps);
    let mut rp_log = Vec::with_capacity(cfg.epochs * state.n_modalities());
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &idx in &order {
            let mut sample = if cfg.method == Method::ModDrop {
                let row = moddrop_row(&data.train[idx].presence, &mut rng);
                apply_presence(&data.train[idx], &row)?
            } else {
                data.train[idx].clone()
            };
            augment(&mut sample, cfg.augment_flip, cfg.augment_intensity, &mut rng);
            let pass = model.forward_sample(&sample, need_uni)?;
            let loss = build_method_loss(cfg.method, cfg.toggles, weights, &model, &pass, &sample, &state.beta)?;
            if !loss.trace.total.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            state.accumulate(&loss.pref);
            let grads = model.backward(&pass, &loss.grads)?;
            let lr = poly_lr(cfg.lr, step, total_steps, cfg.poly_power);
            opt.step(model.params_mut(), &grads, lr)?;
            trace.push(loss.trace);
            step += 1;
        }
        let summary = if cfg.method == Method::Passion && cfg.toggles.beta {
            state.update_beta()
        } else {
            state.close_epoch_frozen()
        };
        for m in 0..summary.beta.len() {
            rp_log.push(RpLogRow {
                epoch,
                modality: m,
                mean_rp: summary.mean_rp[m],
                beta: summary.beta[m],
            });
        }
        let recent = &trace[trace.len() - n..];
        log::info!(
            "epoch {epoch}: mean loss {:.4}, mean RP {:?}",
            recent.iter().map(|t| t.total).sum::<f64>() / n as f64,
            summary.mean_rp
        );
    }
    Ok(TrainOutcome {
        model,
        trace,
        rp_log,
        final_beta: state.beta,
    })
}

pub fn evaluate(cfg: &ExperimentConfig, model: &Backbone, test: &[MultiModalSample]) -> Result<EvalReport> {
    let k = model.config().n_classes;
    let groups = match cfg.grouping {
        Grouping::Nested => nested_groups(k),
        Grouping::Plain => plain_groups(k),
    };
    let opts = EvalOptions {
        variant: cfg.hd_variant,
        ..EvalOptions::default()
    };
    evaluate_combinations(model, test, &groups, &opts)
}

/// Paths of everything a run writes.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub checkpoint: PathBuf,
    pub rp_log: PathBuf,
    pub rp_plot: PathBuf,
    pub report_csv: PathBuf,
    pub report_txt: PathBuf,
    pub config: PathBuf,
    pub loss_trace: PathBuf,
    pub presence: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("model.ckpt"),
            rp_log: dir.join("rp_log.csv"),
            rp_plot: dir.join("rp_plot.svg"),
            report_csv: dir.join("report.csv"),
            report_txt: dir.join("report.txt"),
            config: dir.join("config.resolved"),
            loss_trace: dir.join("loss_trace.csv"),
            presence: dir.join("presence.txt"),
        }
    }
}

pub struct RunOutcome {
    pub train: TrainOutcome,
    pub report: EvalReport,
    pub artifacts: Artifacts,
}

pub fn loss_trace_csv(trace: &[StepTrace]) -> String {
    let mut out = String::from("step,total,seg,reg_sum\n");
    for (i, t) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{}\n", t.total, t.seg, t.reg_sum));
    }
    out
}

/// Generates data, trains, evaluates and writes every artifact under the
/// config's output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let outcome = train(cfg, &data)?;
    let report = evaluate(cfg, &outcome.model, &data.test)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let art = Artifacts::in_dir(&cfg.out_dir);
    fs::write(&art.config, cfg.to_text())?;
    checkpoint::save(&outcome.model, &art.checkpoint)?;
    fs::write(&art.rp_log, rp_log_csv(&outcome.rp_log))?;
    fs::write(&art.rp_plot, emit_rp_plot(&outcome.rp_log)?)?;
    fs::write(&art.report_csv, report.to_csv())?;
    fs::write(&art.report_txt, report.to_table())?;
    fs::write(&art.loss_trace, loss_trace_csv(&outcome.trace))?;
    fs::write(&art.presence, data.presence.to_text())?;
    Ok(RunOutcome {
        train: outcome,
        report,
        artifacts: art,
    })
}
