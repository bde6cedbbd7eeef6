//! The acceptance suite: nine go/no-go checks on the assembled pipeline,
//! each printing one PASS/FAIL line (run with `--nocapture` to see them
//! on success). Oracles here are written from definitions, independent of
//! the library internals they judge.
//!
//! The end-to-end runs (criteria 5 and 8) and the multi-seed trend corpora
//! (criteria 6 and 7) are shared through lazy fixtures so the suite stays
//! inside its time budgets on a single core.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use augcon::augment::{
    add_chunk_noise, resample_by_factor, rir_filter, synth_rir, time_freq_mask, time_stretch,
    AugmentConfig, Strategy,
};
use augcon::dsp::{stft, MelConfig, MelFrontend, StftConfig};
use augcon::eval::{evaluate, ConfusionMatrix};
use augcon::io::{synth_clip, AudioClip, CorpusSpec};
use augcon::model::{
    bind, composed_fixture, composed_graph_check, contrastive_loss, mels_to_tensor, ModelConfig,
    ModelParams, TrainableSet,
};
use augcon::tensor::gradcheck::primitive_battery;
use augcon::tensor::{Tape, Tensor};
use augcon::train::{linear_probe, pretrain, TrainConfig};

fn report(n: usize, what: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n} ({what}): {verdict} [{detail}]");
    assert!(pass, "criterion {n} ({what}) failed: {detail}");
}

fn noise_clips(n: usize, seconds: f64, seed: u64) -> Vec<AudioClip> {
    let sr = 16_000u32;
    let len = (seconds * sr as f64) as usize;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let samples: Vec<f64> = (0..len).map(|_| rng.random_range(-0.4..0.4)).collect();
            AudioClip::new(samples, sr).unwrap()
        })
        .collect()
}

// ------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut reports = primitive_battery().unwrap();
    reports.push(composed_graph_check().unwrap());
    let elapsed = start.elapsed();

    // The composed fixture must exercise the stated dimensions.
    let fixture = composed_fixture().unwrap();
    assert_eq!(fixture.params.config.h_dim(), 8);
    assert_eq!(fixture.params.config.proj_dim, 8);
    assert_eq!(fixture.anchors.shape()[0], 4);

    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
    let within_own = reports.iter().all(|r| r.passed());
    let pass = worst <= 1e-5 && within_own && elapsed <= Duration::from_secs(60);
    report(
        1,
        "gradient correctness",
        pass,
        &format!("max rel err {worst:.3e} over {} checks in {elapsed:.2?}", reports.len()),
    );
}

// ------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_loss_identity() {
    let mut details = Vec::new();
    let mut pass = true;
    for b in [2usize, 16, 128] {
        let clips = noise_clips(b, 2.5, 7_000 + b as u64);
        let mut cfg = TrainConfig::new(7);
        cfg.batch_size = b;
        cfg.steps = 1;
        let (_, logs) = pretrain(&clips, ModelConfig::desk_default(4), &cfg, |_, _| Ok(()))
            .unwrap();
        let delta = (logs[0].loss - (b as f64).ln()).abs();
        pass &= delta <= 1e-6;
        details.push(format!("B={b}: |loss - ln B| = {delta:.2e}"));
    }
    report(2, "first-loss identity", pass, &details.join(", "));
}

// ------------------------------------------------------------- criterion 3

/// DFT by definition over the windowed, zero-padded frame.
fn dft_frame(frame_samples: &[f64], window: &[f64], fft_size: usize, n_bins: usize) -> Vec<Complex64> {
    (0..n_bins)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (n, (&x, &w)) in frame_samples.iter().zip(window).enumerate() {
                acc += Complex64::from_polar(w * x, -TAU * k as f64 * n as f64 / fft_size as f64);
            }
            acc
        })
        .collect()
}

#[test]
fn criterion_3_dsp_oracles() {
    let start = Instant::now();
    let sr = 16_000u32;
    let mut details = Vec::new();

    // (a) STFT vs direct DFT on 1024-sample random signals.
    let cfg = StftConfig::default();
    let win = cfg.window_len(sr);
    let hop = cfg.hop_len(sr);
    let window: Vec<f64> =
        (0..win).map(|i| 0.5 * (1.0 - (TAU * i as f64 / win as f64).cos())).collect();
    let mut stft_err = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let clip = AudioClip::new(samples.clone(), sr).unwrap();
        let frames = stft(&clip, &cfg).unwrap();
        for (t, frame) in frames.iter().enumerate() {
            let oracle = dft_frame(&samples[t * hop..t * hop + win], &window, cfg.fft_size, cfg.n_bins());
            let diff: f64 =
                frame.iter().zip(&oracle).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            let norm: f64 = oracle.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            stft_err = stft_err.max(diff / norm);
        }
    }
    details.push(format!("stft vs dft rel {stft_err:.2e}"));

    // (b) rir_filter vs a naive O(N*M) truncated convolution plus the
    // documented RMS rescale.
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let segment = noise_clips(1, 1.0, 31).remove(0);
    let rir = synth_rir(0.3, sr, &mut rng).unwrap();
    let filtered = rir_filter(&segment, &rir).unwrap();
    let (x, h) = (segment.samples(), rir.taps());
    let mut naive = vec![0.0f64; x.len()];
    for (n, out) in naive.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..=n.min(h.len() - 1) {
            acc += x[n - j] * h[j];
        }
        *out = acc;
    }
    let naive_rms = (naive.iter().map(|s| s * s).sum::<f64>() / naive.len() as f64).sqrt();
    let scale = segment.rms() / naive_rms;
    let diff: f64 = filtered
        .samples()
        .iter()
        .zip(&naive)
        .map(|(a, &b)| (a - b * scale).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = naive.iter().map(|s| (s * scale).powi(2)).sum::<f64>().sqrt();
    let rir_err = diff / norm;
    details.push(format!("rir vs naive rel {rir_err:.2e}"));

    // (c) time-stretch length arithmetic, exactly round(n / factor).
    let mut stretch_exact = true;
    for n in [16_000usize, 24_000, 37_111] {
        let mut lrng = ChaCha8Rng::seed_from_u64(n as u64);
        let clip =
            AudioClip::new((0..n).map(|_| lrng.random_range(-0.4..0.4)).collect(), sr).unwrap();
        for factor in [0.9f64, 1.1] {
            let out = resample_by_factor(&clip, factor);
            stretch_exact &= out.len() == (n as f64 / factor).round() as usize;
        }
        let mut cfg = AugmentConfig { time_stretch: true, ..AugmentConfig::default() };
        cfg.stretch_prob = 1.0;
        let up = time_stretch(&clip, &cfg, &mut rng);
        stretch_exact &= up.len() == (n as f64 / 1.1).round() as usize;
        cfg.stretch_prob = 0.0;
        let down = time_stretch(&clip, &cfg, &mut rng);
        stretch_exact &= down.len() == (n as f64 / 0.9).round() as usize;
    }
    details.push(format!("stretch lengths exact: {stretch_exact}"));

    // (d) chunk-noise SNR within +/-0.5 dB of target over 100 draws.
    let clip = noise_clips(1, 2.0, 77).remove(0);
    let chunk_len = sr as usize;
    let mut snr_worst = 0.0f64;
    for i in 0..100u64 {
        let target = 5.0 + 15.0 * i as f64 / 99.0;
        let mut rng = ChaCha8Rng::seed_from_u64(500 + i);
        let noisy = add_chunk_noise(&clip, target, 1.0, &mut rng).unwrap();
        let diff: Vec<f64> =
            noisy.samples().iter().zip(clip.samples()).map(|(a, b)| a - b).collect();
        let chunk_start = diff.iter().position(|&d| d != 0.0).unwrap();
        let window = chunk_start..chunk_start + chunk_len;
        let sig: f64 =
            clip.samples()[window.clone()].iter().map(|s| s * s).sum::<f64>() / chunk_len as f64;
        let noise: f64 = diff[window].iter().map(|d| d * d).sum::<f64>() / chunk_len as f64;
        let achieved = 10.0 * (sig / noise).log10();
        snr_worst = snr_worst.max((achieved - target).abs());
    }
    details.push(format!("snr worst dev {snr_worst:.3} dB"));

    let elapsed = start.elapsed();
    let pass = stft_err <= 1e-6
        && rir_err <= 1e-6
        && stretch_exact
        && snr_worst <= 0.5
        && elapsed <= Duration::from_secs(60);
    details.push(format!("in {elapsed:.2?}"));
    report(3, "dsp oracle equivalence", pass, &details.join(", "));
}

// ------------------------------------------------------------- criterion 4

/// Metrics from first principles: explicit TP/FP/FN tallies.
struct MetricOracle {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl MetricOracle {
    fn build(n: usize, counts: &[u64]) -> Self {
        let (mut tp, mut fp, mut fn_) = (vec![0u64; n], vec![0u64; n], vec![0u64; n]);
        for t in 0..n {
            for p in 0..n {
                let c = counts[t * n + p];
                if t == p {
                    tp[t] += c;
                } else {
                    fp[p] += c;
                    fn_[t] += c;
                }
            }
        }
        Self { tp, fp, fn_ }
    }

    fn div(a: u64, b: u64) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    fn precision(&self, k: usize) -> f64 {
        Self::div(self.tp[k], self.tp[k] + self.fp[k])
    }

    fn recall(&self, k: usize) -> f64 {
        Self::div(self.tp[k], self.tp[k] + self.fn_[k])
    }

    fn f1(&self, k: usize) -> f64 {
        let (p, r) = (self.precision(k), self.recall(k));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[test]
fn criterion_4_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4_000);
    let mut worst = 0.0f64;
    let mut tallies_exact = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8usize);
        let counts: Vec<u64> = (0..n * n).map(|_| rng.random_range(0..25u64)).collect();
        let mut cm = ConfusionMatrix::new(n);
        for t in 0..n {
            for p in 0..n {
                for _ in 0..counts[t * n + p] {
                    cm.record(t, p).unwrap();
                }
            }
        }
        let oracle = MetricOracle::build(n, &counts);

        let mut macro_sum = 0.0;
        for k in 0..n {
            tallies_exact &= cm.support(k) == oracle.tp[k] + oracle.fn_[k];
            tallies_exact &= cm.predicted(k) == oracle.tp[k] + oracle.fp[k];
            tallies_exact &= cm.count(k, k) == oracle.tp[k];
            worst = worst.max((cm.precision(k) - oracle.precision(k)).abs());
            worst = worst.max((cm.recall(k) - oracle.recall(k)).abs());
            worst = worst.max((cm.f1(k) - oracle.f1(k)).abs());
            macro_sum += oracle.f1(k);
        }
        worst = worst.max((cm.macro_f1() - macro_sum / n as f64).abs());

        let total: u64 = counts.iter().sum();
        if total > 0 {
            let wap_oracle: f64 = (0..n)
                .map(|k| (oracle.tp[k] + oracle.fn_[k]) as f64 * oracle.precision(k))
                .sum::<f64>()
                / total as f64;
            worst = worst.max((cm.weighted_avg_precision().unwrap() - wap_oracle).abs());
        }

        let rows = cm.normalized();
        for t in 0..n {
            let support = oracle.tp[t] + oracle.fn_[t];
            for p in 0..n {
                let expect = MetricOracle::div(counts[t * n + p], support);
                worst = worst.max((rows[t * n + p] - expect).abs());
            }
        }
    }
    let pass = tallies_exact && worst <= 1e-12;
    report(
        4,
        "metric oracle equivalence",
        pass,
        &format!("tallies exact: {tallies_exact}, worst ratio dev {worst:.2e} over 1000 matrices"),
    );
}

// --------------------------------------------------- criteria 5 + 8 (e2e)

struct E2eFixture {
    root: PathBuf,
    run_a_time: Duration,
    probe_f1: f64,
    finetune_f1: f64,
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_augcon"))
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn macro_f1_of(path: &Path) -> f64 {
    let value: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    value["macro_f1"].as_f64().unwrap()
}

/// One full pipeline pass: pretrain 2000 steps, probe, finetune, all via
/// the binary with `--threads 1`.
fn full_run(manifest: &Path, base: &Path) {
    let m = manifest.to_str().unwrap();
    run_ok(&[
        "pretrain",
        "--manifest",
        m,
        "--out",
        base.join("pre").to_str().unwrap(),
        "--strategy",
        "stretch+mask",
        "--steps",
        "2000",
        "--batch",
        "16",
        "--seed",
        "7",
        "--threads",
        "1",
    ]);
    let ckpt = base.join("pre/checkpoint.aclc");
    for mode in ["probe", "finetune"] {
        run_ok(&[
            mode,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            m,
            "--out",
            base.join(mode).to_str().unwrap(),
            "--seed",
            "7",
            "--threads",
            "1",
        ]);
    }
}

static E2E: OnceLock<E2eFixture> = OnceLock::new();

fn e2e() -> &'static E2eFixture {
    E2E.get_or_init(|| {
        let dir = Box::leak(Box::new(tempfile::tempdir().unwrap()));
        let corpus = dir.path().join("corpus");
        let start = Instant::now();
        run_ok(&[
            "synth-data",
            "--out",
            corpus.to_str().unwrap(),
            "--classes",
            "4",
            "--clips-per-class",
            "30",
            "--seed",
            "7",
        ]);
        let manifest = corpus.join("manifest.jsonl");
        full_run(&manifest, &dir.path().join("a"));
        let run_a_time = start.elapsed();
        full_run(&manifest, &dir.path().join("b"));

        E2eFixture {
            root: dir.path().to_path_buf(),
            run_a_time,
            probe_f1: macro_f1_of(&dir.path().join("a/probe/metrics.json")),
            finetune_f1: macro_f1_of(&dir.path().join("a/finetune/metrics.json")),
        }
    })
}

#[test]
fn criterion_5_end_to_end_learning() {
    let e2e = e2e();
    let pass = e2e.probe_f1 >= 0.8
        && e2e.finetune_f1 >= e2e.probe_f1 - 0.02
        && e2e.run_a_time <= Duration::from_secs(900);
    report(
        5,
        "end-to-end learning",
        pass,
        &format!(
            "probe macro-F1 {:.4}, finetune macro-F1 {:.4}, run time {:.1?}",
            e2e.probe_f1, e2e.finetune_f1, e2e.run_a_time
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let e2e = e2e();
    let artifacts = [
        "pre/checkpoint.aclc",
        "pre/checkpoint.aclc.json",
        "probe/checkpoint.aclc",
        "probe/checkpoint.aclc.json",
        "probe/metrics.json",
        "finetune/checkpoint.aclc",
        "finetune/checkpoint.aclc.json",
        "finetune/metrics.json",
    ];
    let mut differing = Vec::new();
    for artifact in artifacts {
        let a = fs::read(e2e.root.join("a").join(artifact)).unwrap();
        let b = fs::read(e2e.root.join("b").join(artifact)).unwrap();
        if a != b {
            differing.push(artifact);
        }
    }
    report(
        8,
        "byte-identical reruns",
        differing.is_empty(),
        &format!("{} artifacts compared, differing: {differing:?}", artifacts.len()),
    );
}

// ------------------------------------------------- criteria 6 + 7 (trends)

const TREND_SEEDS: [u64; 5] = [101, 102, 103, 104, 105];
const TREND_STEPS: usize = 600;

struct TrendSeedResult {
    aug_perturbed_f1: f64,
    noise_perturbed_f1: f64,
    ssl_clean_f1: f64,
    random_clean_f1: f64,
}

/// In-memory corpus: 4 classes x 16 clips of 4 s; per class the first 8
/// pretrain, the next 4 train, the last 4 test.
fn trend_corpus(seed: u64) -> (Vec<AudioClip>, Vec<(AudioClip, usize)>, Vec<(AudioClip, usize)>) {
    let spec = CorpusSpec {
        n_classes: 4,
        clips_per_class: 16,
        clip_seconds: 4.0,
        sample_rate: 16_000,
        seed,
    };
    let mut pretrain_clips = Vec::new();
    let mut train_items = Vec::new();
    let mut test_items = Vec::new();
    let mut index = 0u64;
    for class in 0..spec.n_classes {
        for i in 0..spec.clips_per_class {
            let clip = synth_clip(&spec, class, index);
            index += 1;
            match i {
                0..=7 => pretrain_clips.push(clip),
                8..=11 => train_items.push((clip, class)),
                _ => test_items.push((clip, class)),
            }
        }
    }
    (pretrain_clips, train_items, test_items)
}

/// Predicts with test-time stretch+mask perturbation: the audio is
/// stretched, then every non-overlapping 1 s segment's log-mel is masked
/// before the forward pass.
fn perturbed_macro_f1(
    params: &ModelParams<f32>,
    items: &[(AudioClip, usize)],
    seed: u64,
) -> f64 {
    let frontend = MelFrontend::new(MelConfig::default(), 16_000).unwrap();
    let perturb = AugmentConfig { time_stretch: true, ..AugmentConfig::default() };
    let mut preds = Vec::with_capacity(items.len());
    let labels: Vec<usize> = items.iter().map(|(_, l)| *l).collect();
    for (i, (clip, _)) in items.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
        rng.set_stream(i as u64);
        let stretched = time_stretch(clip, &perturb, &mut rng);
        let seg_len = stretched.sample_rate() as usize;
        let mels: Vec<_> = (0..stretched.len() / seg_len)
            .map(|s| {
                let mel = frontend.log_mel(&stretched.segment(s * seg_len, seg_len).unwrap()).unwrap();
                time_freq_mask(&mel, perturb.mask_t_max, perturb.mask_f_max, &mut rng)
            })
            .collect();

        let mut tape: Tape<f32> = Tape::new();
        let bound = bind(&mut tape, params, TrainableSet::None);
        let x = tape.constant(mels_to_tensor(&mels).unwrap());
        let h = bound.encoder_forward(&mut tape, x).unwrap();
        let logits = bound.classifier_forward(&mut tape, h).unwrap();
        let data = tape.data(logits);

        let n_classes = params.config.n_classes;
        let mut mean = vec![0.0f64; n_classes];
        for seg in 0..mels.len() {
            for (k, m) in mean.iter_mut().enumerate() {
                *m += data[seg * n_classes + k] as f64;
            }
        }
        let best = (1..n_classes).fold(0, |best, k| if mean[k] > mean[best] { k } else { best });
        preds.push(best);
    }
    ConfusionMatrix::from_pairs(&preds, &labels, params.config.n_classes)
        .unwrap()
        .macro_f1()
}

fn trend_seed(seed: u64) -> TrendSeedResult {
    let (pretrain_clips, train_items, test_items) = trend_corpus(seed);
    let model = ModelConfig::desk_default(4);

    let pretrained_for = |strategy: Strategy| {
        let mut cfg = TrainConfig::new(seed);
        cfg.batch_size = 8;
        cfg.steps = TREND_STEPS;
        strategy.configure(&mut cfg.augment);
        let (params, _) = pretrain(&pretrain_clips, model.clone(), &cfg, |_, _| Ok(())).unwrap();
        params
    };
    let probe_of = |params: &ModelParams<f32>| {
        let mut cfg = TrainConfig::new(seed);
        cfg.batch_size = 8;
        cfg.epochs = 20;
        linear_probe(params, &train_items, &cfg).unwrap().0
    };

    let aug_probe = probe_of(&pretrained_for(Strategy::StretchMask));
    let noise_probe = probe_of(&pretrained_for(Strategy::Noise));
    let random_probe = probe_of(&ModelParams::<f32>::init(model, seed ^ 0xdead_beef).unwrap());

    TrendSeedResult {
        aug_perturbed_f1: perturbed_macro_f1(&aug_probe, &test_items, seed),
        noise_perturbed_f1: perturbed_macro_f1(&noise_probe, &test_items, seed),
        ssl_clean_f1: evaluate(&aug_probe, &test_items).unwrap().0.macro_f1,
        random_clean_f1: evaluate(&random_probe, &test_items).unwrap().0.macro_f1,
    }
}

static TREND: OnceLock<Vec<TrendSeedResult>> = OnceLock::new();

fn trend() -> &'static Vec<TrendSeedResult> {
    TREND.get_or_init(|| TREND_SEEDS.iter().map(|&s| trend_seed(s)).collect())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_6_augmentation_trend() {
    let results = trend();
    let aug = mean(results.iter().map(|r| r.aug_perturbed_f1));
    let noise = mean(results.iter().map(|r| r.noise_perturbed_f1));
    let per_seed: Vec<String> = results
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.aug_perturbed_f1, r.noise_perturbed_f1))
        .collect();
    report(
        6,
        "stretch+mask beats noise baseline on perturbed test",
        aug >= noise,
        &format!(
            "mean macro-F1 over {} seeds: stretch+mask {aug:.4} vs noise {noise:.4} (per seed {})",
            results.len(),
            per_seed.join(" ")
        ),
    );
}

#[test]
fn criterion_7_ssl_beats_random() {
    let results = trend();
    let ssl = mean(results.iter().map(|r| r.ssl_clean_f1));
    let random = mean(results.iter().map(|r| r.random_clean_f1));
    report(
        7,
        "pretrained probe beats random-init probe",
        ssl > random,
        &format!("mean macro-F1 over {} seeds: pretrained {ssl:.4} vs random {random:.4}", results.len()),
    );
}

// ------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_invariance_probes() {
    let mut details = Vec::new();

    // Contrastive loss of a fixed similarity matrix, via the public graph.
    let loss_of = |values: Vec<f64>, b: usize| -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let s = tape.constant(Tensor::new(vec![b, b], values).unwrap());
        let loss = contrastive_loss(&mut tape, s).unwrap();
        tape.scalar_value(loss).unwrap()
    };
    let b = 6usize;
    let mut rng = ChaCha8Rng::seed_from_u64(9_000);
    let s: Vec<f64> = (0..b * b).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = loss_of(s.clone(), b);

    let shifted: Vec<f64> = s.iter().map(|v| v + 0.37).collect();
    let shift_dev = (loss_of(shifted, b) - base).abs();
    details.push(format!("shift dev {shift_dev:.2e}"));

    let perm = [3usize, 0, 5, 1, 4, 2];
    let permuted: Vec<f64> =
        (0..b * b).map(|i| s[perm[i / b] * b + perm[i % b]]).collect();
    let perm_dev = (loss_of(permuted, b) - base).abs();
    details.push(format!("permutation dev {perm_dev:.2e}"));

    // The probe must not move frozen tensors, bit for bit.
    let pretrained = ModelParams::<f32>::init(ModelConfig::desk_default(3), 91).unwrap();
    let items: Vec<(AudioClip, usize)> = noise_clips(6, 1.5, 92)
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, i % 3))
        .collect();
    let mut cfg = TrainConfig::new(93);
    cfg.epochs = 2;
    cfg.batch_size = 4;
    let (probed, _) = linear_probe(&pretrained, &items, &cfg).unwrap();
    let mut frozen_ok = true;
    let mut cls_moved = false;
    for ((name, before), (_, after)) in
        pretrained.named_tensors().iter().zip(probed.named_tensors().iter())
    {
        let same = before.data().iter().zip(after.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        if name.starts_with("cls.") {
            cls_moved |= !same;
        } else {
            frozen_ok &= same;
        }
    }
    details.push(format!("frozen bit-identical: {frozen_ok}, classifier trained: {cls_moved}"));

    // Zero-width masking is the identity.
    let clip = noise_clips(1, 1.0, 94).remove(0);
    let mel = MelFrontend::new(MelConfig::default(), 16_000)
        .unwrap()
        .log_mel(&clip)
        .unwrap();
    let masked = time_freq_mask(&mel, 0, 0, &mut rng);
    let mask_identity = masked.values() == mel.values();
    details.push(format!("zero-width mask identity: {mask_identity}"));

    let pass = shift_dev <= 1e-9 && perm_dev <= 1e-9 && frozen_ok && cls_moved && mask_identity;
    report(9, "invariance probes", pass, &details.join(", "));
}
