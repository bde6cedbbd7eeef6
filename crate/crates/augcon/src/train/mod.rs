//! Training orchestration: contrastive pretraining and the two downstream
//! transfer modes (linear probe, finetune).
//!
//! All randomness flows from the config seed through ChaCha streams:
//! batch sampling uses stream `u64::MAX`, downstream segment draws stream
//! `u64::MAX - 1`, and step `n`'s pair augmentation is seeded with
//! `seed + n + 1` (the pair sampler assigns one stream per batch row
//! internally, so results are bit-identical at any thread count).

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_pairs, AugmentConfig};
use crate::dsp::{MelConfig, MelFrontend, MelSpectrogram};
use crate::io::AudioClip;
use crate::model::{
    bind, contrastive_loss, mels_to_tensor, ModelConfig, ModelParams, TrainableSet,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Gradients, Tape, Tensor};
use crate::{Error, Result};

const BATCH_STREAM: u64 = u64::MAX;
const SEGMENT_STREAM: u64 = u64::MAX - 1;

/// Knobs for one training run. The seed is mandatory; there is no implicit
/// entropy anywhere in the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Pretraining steps.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Downstream (probe/finetune) epochs.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Emit a checkpoint snapshot every this many pretraining steps;
    /// 0 disables interval snapshots (the final state is always returned).
    #[serde(default)]
    pub checkpoint_interval: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
}

fn default_batch_size() -> usize {
    16
}

fn default_steps() -> usize {
    2000
}

fn default_epochs() -> usize {
    30
}

fn default_lr() -> f64 {
    1e-3
}

impl TrainConfig {
    /// Desk-scale defaults: B=16, 2000 pretraining steps, 30 downstream
    /// epochs, lr 1e-3.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            batch_size: default_batch_size(),
            steps: default_steps(),
            epochs: default_epochs(),
            lr: default_lr(),
            checkpoint_interval: 0,
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate_for_pretrain(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall { got: self.batch_size, need: 2 });
        }
        AdamConfig::with_lr(self.lr).validate()
    }

    pub fn validate_for_downstream(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        AdamConfig::with_lr(self.lr).validate()
    }
}

/// One optimizer step's log record; serialized as JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

/// Mel frontend matching the model's input geometry.
fn frontend_for(config: &ModelConfig, sample_rate: u32) -> Result<MelFrontend> {
    let mel = MelConfig {
        n_mels: config.input_mels,
        frames: config.input_frames,
        ..MelConfig::default()
    };
    MelFrontend::new(mel, sample_rate)
}

/// Element counts of the tensors a set trains, in canonical order.
fn trainable_sizes(params: &ModelParams<f32>, set: TrainableSet) -> Vec<usize> {
    params
        .named_tensors()
        .iter()
        .filter(|(name, _)| set.includes(name))
        .map(|(_, t)| t.numel())
        .collect()
}

/// Takes gradients off the tape in trainable order and applies one Adam
/// step to the matching parameter tensors.
fn apply_adam(
    params: &mut ModelParams<f32>,
    trainable: &[(String, crate::tensor::Var)],
    grads: &mut Gradients<f32>,
    state: &mut AdamState<f32>,
    adam: &AdamConfig,
) -> Result<()> {
    let mut pulled: Vec<(&str, Vec<f32>)> = Vec::with_capacity(trainable.len());
    for (name, var) in trainable {
        let g = grads.take(*var).ok_or(Error::DisconnectedGraph)?;
        pulled.push((name.as_str(), g));
    }
    // Trainable order is the canonical tensor order filtered to the set,
    // so a single merge pass pairs gradients with parameter slices.
    let mut updates: Vec<(&str, &mut [f32], &[f32])> = Vec::with_capacity(pulled.len());
    let mut next = pulled.iter();
    let mut cur = next.next();
    for (name, tensor) in params.named_tensors_mut() {
        if let Some((gname, g)) = cur {
            if *gname == name {
                updates.push((gname, tensor.data_mut(), g.as_slice()));
                cur = next.next();
            }
        }
    }
    debug_assert!(cur.is_none(), "gradient without a matching parameter");
    adam_step(adam, state, &mut updates)
}

/// Contrastive pretraining over unlabeled clips.
///
/// Each step samples `batch_size` distinct clips (uniformly, with
/// replacement across steps), builds augmented anchor/positive mel pairs,
/// and minimizes the contrastive loss. `snapshot` fires every
/// `checkpoint_interval` steps with the step number and current parameters.
/// Labels never enter this function's signature by construction.
pub fn pretrain(
    clips: &[AudioClip],
    model_config: ModelConfig,
    cfg: &TrainConfig,
    mut snapshot: impl FnMut(usize, &ModelParams<f32>) -> Result<()>,
) -> Result<(ModelParams<f32>, Vec<StepLog>)> {
    cfg.validate_for_pretrain()?;
    model_config.validate()?;
    cfg.augment.validate(model_config.input_frames, model_config.input_mels)?;
    if clips.len() < cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} pretraining clips, batch size {}",
            clips.len(),
            cfg.batch_size
        )));
    }
    let sample_rate = clips[0].sample_rate();
    let frontend = frontend_for(&model_config, sample_rate)?;

    let mut params = ModelParams::<f32>::init(model_config, cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::for_sizes(&trainable_sizes(&params, TrainableSet::Pretrain));

    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
    sampler.set_stream(BATCH_STREAM);

    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let start = Instant::now();
        let picks = rand::seq::index::sample(&mut sampler, clips.len(), cfg.batch_size);
        let batch: Vec<AudioClip> = picks.iter().map(|i| clips[i].clone()).collect();
        let pair_seed = cfg.seed.wrapping_add(step as u64 + 1);
        let pairs = make_pairs(&batch, &cfg.augment, &frontend, pair_seed)?;

        let anchors: Tensor<f32> = mels_to_tensor(&pairs.anchors)?;
        let positives: Tensor<f32> = mels_to_tensor(&pairs.positives)?;

        let mut tape: Tape<f32> = Tape::new();
        let bound = bind(&mut tape, &params, TrainableSet::Pretrain);
        let xa = tape.constant(anchors);
        let xp = tape.constant(positives);
        let ha = bound.encoder_forward(&mut tape, xa)?;
        let hp = bound.encoder_forward(&mut tape, xp)?;
        let za = bound.project(&mut tape, ha)?;
        let zp = bound.project(&mut tape, hp)?;
        let s = bound.bilinear_similarity(&mut tape, za, zp)?;
        let loss = contrastive_loss(&mut tape, s)?;

        let loss_value = tape.scalar_value(loss)? as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let mut grads = tape.backward(loss)?;
        apply_adam(&mut params, bound.trainable(), &mut grads, &mut state, &adam)?;

        logs.push(StepLog {
            step,
            loss: loss_value,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
            snapshot(step + 1, &params)?;
        }
    }
    Ok((params, logs))
}

/// Checks labels and clip lengths for downstream training.
fn validate_items(items: &[(AudioClip, usize)], n_classes: usize, seg_len: usize) -> Result<()> {
    if items.is_empty() {
        return Err(Error::MissingLabels("no labeled clips in the train split".into()));
    }
    for (clip, label) in items {
        if *label >= n_classes {
            return Err(Error::OutOfRangeLabel { label: *label, n_classes });
        }
        if clip.len() < seg_len {
            return Err(Error::ClipTooShort(format!(
                "{} samples, downstream training needs a full {seg_len}-sample segment",
                clip.len()
            )));
        }
    }
    Ok(())
}

/// One clean (un-augmented) 1 s segment per item, freshly drawn.
fn draw_segments(
    items: &[(AudioClip, usize)],
    seg_len: usize,
    frontend: &MelFrontend,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MelSpectrogram>> {
    items
        .iter()
        .map(|(clip, _)| {
            let start = rng.random_range(0..=clip.len() - seg_len);
            frontend.log_mel(&clip.segment(start, seg_len)?)
        })
        .collect()
}

fn downstream(
    pretrained: &ModelParams<f32>,
    items: &[(AudioClip, usize)],
    cfg: &TrainConfig,
    set: TrainableSet,
) -> Result<(ModelParams<f32>, Vec<StepLog>)> {
    cfg.validate_for_downstream()?;
    let mut params = pretrained.clone();
    params.reinit_classifier(cfg.seed);

    let sample_rate = items.first().map(|(c, _)| c.sample_rate()).unwrap_or(16_000);
    let seg_len = sample_rate as usize;
    validate_items(items, params.config.n_classes, seg_len)?;
    let frontend = frontend_for(&params.config, sample_rate)?;

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::for_sizes(&trainable_sizes(&params, set));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SEGMENT_STREAM);

    let h_dim = params.config.h_dim();
    let mut logs = Vec::new();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        let mels = draw_segments(items, seg_len, &frontend, &mut rng)?;

        // Probing never backpropagates into the encoder, so embed the whole
        // epoch once and train the classifier on constant rows.
        let epoch_h: Option<Vec<f32>> = if set == TrainableSet::ClassifierOnly {
            let x: Tensor<f32> = mels_to_tensor(&mels)?;
            let mut tape: Tape<f32> = Tape::new();
            let bound = bind(&mut tape, &params, TrainableSet::None);
            let xv = tape.constant(x);
            let h = bound.encoder_forward(&mut tape, xv)?;
            Some(tape.data(h).to_vec())
        } else {
            None
        };

        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let start = Instant::now();
            let labels: Vec<usize> = chunk.iter().map(|&i| items[i].1).collect();

            let mut tape: Tape<f32> = Tape::new();
            let bound = bind(&mut tape, &params, set);
            let h = match &epoch_h {
                Some(all) => {
                    let mut rows = Vec::with_capacity(chunk.len() * h_dim);
                    for &i in chunk {
                        rows.extend_from_slice(&all[i * h_dim..(i + 1) * h_dim]);
                    }
                    tape.constant(Tensor::new(vec![chunk.len(), h_dim], rows)?)
                }
                None => {
                    let batch: Vec<MelSpectrogram> =
                        chunk.iter().map(|&i| mels[i].clone()).collect();
                    let x: Tensor<f32> = mels_to_tensor(&batch)?;
                    let xv = tape.constant(x);
                    bound.encoder_forward(&mut tape, xv)?
                }
            };
            let logits = bound.classifier_forward(&mut tape, h)?;
            let losses = tape.softmax_cross_entropy(logits, &labels)?;
            let loss = tape.scalar_mean(losses);

            let loss_value = tape.scalar_value(loss)? as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            let mut grads = tape.backward(loss)?;
            apply_adam(&mut params, bound.trainable(), &mut grads, &mut state, &adam)?;

            logs.push(StepLog {
                step,
                loss: loss_value,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
    }
    Ok((params, logs))
}

/// Linear probe: freezes the encoder (and projection) and trains a fresh
/// classifier head on clean 1 s segment embeddings.
pub fn linear_probe(
    pretrained: &ModelParams<f32>,
    items: &[(AudioClip, usize)],
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, Vec<StepLog>)> {
    downstream(pretrained, items, cfg, TrainableSet::ClassifierOnly)
}

/// Finetune: trains encoder and a freshly initialized classifier together;
/// the contrastive projection head is untouched downstream.
pub fn finetune(
    pretrained: &ModelParams<f32>,
    items: &[(AudioClip, usize)],
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, Vec<StepLog>)> {
    downstream(pretrained, items, cfg, TrainableSet::EncoderAndClassifier)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_clips(n: usize, seconds: f64, seed: u64) -> Vec<AudioClip> {
        let sr = 16_000u32;
        let len = (seconds * sr as f64) as usize;
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let samples: Vec<f64> =
                    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
                AudioClip::new(samples, sr).unwrap()
            })
            .collect()
    }

    fn labeled_items(n: usize, n_classes: usize, seed: u64) -> Vec<(AudioClip, usize)> {
        noise_clips(n, 1.5, seed)
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, i % n_classes))
            .collect()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig::desk_default(3)
    }

    fn bits(params: &ModelParams<f32>) -> Vec<(String, Vec<u32>)> {
        params
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn first_pretrain_loss_is_ln_b() {
        for b in [2usize, 16] {
            let clips = noise_clips(b, 2.5, 77);
            let mut cfg = TrainConfig::new(5);
            cfg.batch_size = b;
            cfg.steps = 1;
            let (_, logs) = pretrain(&clips, tiny_model(), &cfg, |_, _| Ok(())).unwrap();
            let expect = (b as f64).ln();
            assert!(
                (logs[0].loss - expect).abs() <= 1e-6,
                "B={b}: {} vs {expect}",
                logs[0].loss
            );
        }
    }

    #[test]
    fn pretrain_is_deterministic() {
        let clips = noise_clips(5, 2.5, 3);
        let mut cfg = TrainConfig::new(9);
        cfg.batch_size = 4;
        cfg.steps = 3;
        let (a, la) = pretrain(&clips, tiny_model(), &cfg, |_, _| Ok(())).unwrap();
        let (b, lb) = pretrain(&clips, tiny_model(), &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(bits(&a), bits(&b));
        let losses = |l: &[StepLog]| l.iter().map(|s| s.loss).collect::<Vec<_>>();
        assert_eq!(losses(&la), losses(&lb));

        cfg.seed = 10;
        let (c, _) = pretrain(&clips, tiny_model(), &cfg, |_, _| Ok(())).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn pretrain_requires_enough_clips() {
        let clips = noise_clips(3, 2.5, 1);
        let mut cfg = TrainConfig::new(1);
        cfg.batch_size = 4;
        cfg.steps = 1;
        assert!(matches!(
            pretrain(&clips, tiny_model(), &cfg, |_, _| Ok(())),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn snapshots_fire_on_the_interval() {
        let clips = noise_clips(4, 2.5, 2);
        let mut cfg = TrainConfig::new(4);
        cfg.batch_size = 2;
        cfg.steps = 5;
        cfg.checkpoint_interval = 2;
        let mut seen = Vec::new();
        pretrain(&clips, tiny_model(), &cfg, |step, _| {
            seen.push(step);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, [2, 4]);
    }

    #[test]
    fn probe_leaves_frozen_tensors_bit_identical() {
        let pretrained = ModelParams::<f32>::init(tiny_model(), 21).unwrap();
        let before = bits(&pretrained);
        let items = labeled_items(6, 3, 22);
        let mut cfg = TrainConfig::new(23);
        cfg.epochs = 2;
        cfg.batch_size = 4;
        let (probed, logs) = linear_probe(&pretrained, &items, &cfg).unwrap();

        assert_eq!(bits(&pretrained), before, "input params must not move");
        assert!(!logs.is_empty());
        for ((name, a), (_, b)) in before.iter().zip(bits(&probed).iter()) {
            if name.starts_with("cls.") {
                assert_ne!(a, b, "{name} should have trained");
            } else {
                assert_eq!(a, b, "{name} must stay frozen");
            }
        }
    }

    #[test]
    fn probe_demands_labels() {
        let pretrained = ModelParams::<f32>::init(tiny_model(), 1).unwrap();
        let cfg = TrainConfig::new(2);
        assert!(matches!(
            linear_probe(&pretrained, &[], &cfg),
            Err(Error::MissingLabels(_))
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let pretrained = ModelParams::<f32>::init(tiny_model(), 1).unwrap();
        let mut items = labeled_items(3, 3, 4);
        items[1].1 = 3;
        let cfg = TrainConfig::new(2);
        assert!(matches!(
            linear_probe(&pretrained, &items, &cfg),
            Err(Error::OutOfRangeLabel { label: 3, n_classes: 3 })
        ));
    }

    #[test]
    fn zero_epochs_is_a_fresh_head_no_op() {
        let pretrained = ModelParams::<f32>::init(tiny_model(), 31).unwrap();
        let items = labeled_items(4, 3, 32);
        let mut cfg = TrainConfig::new(33);
        cfg.epochs = 0;

        let (probed, logs) = linear_probe(&pretrained, &items, &cfg).unwrap();
        assert!(logs.is_empty());
        let (tuned, logs) = finetune(&pretrained, &items, &cfg).unwrap();
        assert!(logs.is_empty());

        let mut expect = pretrained.clone();
        expect.reinit_classifier(cfg.seed);
        assert_eq!(bits(&probed), bits(&expect));
        assert_eq!(bits(&tuned), bits(&expect));
    }

    #[test]
    fn finetune_is_deterministic_and_trains_the_encoder() {
        let pretrained = ModelParams::<f32>::init(tiny_model(), 41).unwrap();
        let items = labeled_items(5, 3, 42);
        let mut cfg = TrainConfig::new(43);
        cfg.epochs = 2;
        cfg.batch_size = 3;

        let (a, _) = finetune(&pretrained, &items, &cfg).unwrap();
        let (b, _) = finetune(&pretrained, &items, &cfg).unwrap();
        assert_eq!(bits(&a), bits(&b));

        let moved = |name: &str| {
            let idx = pretrained.named_tensors().iter().position(|(n, _)| n == name).unwrap();
            bits(&a)[idx] != bits(&pretrained)[idx]
        };
        assert!(moved("enc.0.kernel"));
        assert!(moved("cls.weight"));
        assert!(!moved("proj.weight"), "projection is not trained downstream");
        assert!(!moved("bilinear.w"));
    }

    #[test]
    fn short_clips_are_rejected_downstream() {
        let pretrained = ModelParams::<f32>::init(tiny_model(), 51).unwrap();
        let items = vec![(noise_clips(1, 0.5, 52).remove(0), 0usize)];
        let cfg = TrainConfig::new(53);
        assert!(matches!(
            linear_probe(&pretrained, &items, &cfg),
            Err(Error::ClipTooShort(_))
        ));
    }

    #[test]
    fn probe_loss_decreases_on_separable_embeddings() {
        // Clips of two classes with very different amplitudes give the
        // encoder trivially separable embeddings; the probe should fit them.
        let sr = 16_000u32;
        let mut items = Vec::new();
        for i in 0..8usize {
            let amp = if i % 2 == 0 { 0.02 } else { 0.6 };
            let mut rng = ChaCha8Rng::seed_from_u64(61);
            rng.set_stream(i as u64);
            let samples: Vec<f64> = (0..(sr as usize * 3 / 2))
                .map(|_| rng.random_range(-amp..amp))
                .collect();
            items.push((AudioClip::new(samples, sr).unwrap(), i % 2));
        }
        let config = ModelConfig::desk_default(2);
        let pretrained = ModelParams::<f32>::init(config, 62).unwrap();
        let mut cfg = TrainConfig::new(63);
        cfg.epochs = 40;
        cfg.batch_size = 8;
        cfg.lr = 1e-2;
        let (_, logs) = linear_probe(&pretrained, &items, &cfg).unwrap();
        let first = logs.first().unwrap().loss;
        let last = logs.last().unwrap().loss;
        assert!(last < first * 0.5, "probe failed to fit: {first} -> {last}");
    }
}
