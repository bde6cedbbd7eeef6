//! The contrastive network: a small convolutional encoder, a tanh projection
//! head, a bilinear similarity, the contrastive loss, and a linear
//! classifier head for downstream tasks.
//!
//! Parameters live in [`ModelParams`] as plain tensors; a forward pass binds
//! them onto a fresh [`Tape`] via [`bind`], with the trainable subset chosen
//! per phase (pretraining, linear probe, finetune, evaluation).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::MelSpectrogram;
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Architecture description. The encoder is a stack of
/// [conv 3x3, relu, 2x2 mean-pool] blocks followed by a global mean pool,
/// so the embedding width equals the last channel count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv_channels: Vec<usize>,
    pub input_frames: usize,
    pub input_mels: usize,
    pub proj_dim: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 8-16-32-64 channels on a 96x64 input with a
    /// 64-wide projection. The full-scale projection width (512) is a
    /// config change, not a code change.
    pub fn desk_default(n_classes: usize) -> Self {
        Self {
            conv_channels: vec![8, 16, 32, 64],
            input_frames: 96,
            input_mels: 64,
            proj_dim: 64,
            n_classes,
        }
    }

    /// Embedding width after global mean pooling.
    pub fn h_dim(&self) -> usize {
        *self.conv_channels.last().unwrap_or(&0)
    }

    /// Spatial size after each block; errors if any conv underflows.
    fn stage_dims(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.input_frames, self.input_mels);
        let mut dims = Vec::new();
        for (i, _) in self.conv_channels.iter().enumerate() {
            if h < 3 || w < 3 {
                return Err(Error::InvalidConfig(format!(
                    "block {i}: {h}x{w} input is smaller than the 3x3 kernel"
                )));
            }
            h -= 2;
            w -= 2;
            h /= 2;
            w /= 2;
            if h == 0 || w == 0 {
                return Err(Error::InvalidConfig(format!(
                    "block {i}: spatial size collapsed to {h}x{w}"
                )));
            }
            dims.push((h, w));
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::InvalidConfig("encoder needs at least one block".into()));
        }
        if self.proj_dim == 0 {
            return Err(Error::InvalidConfig("proj_dim must be at least 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        self.stage_dims().map(|_| ())
    }
}

/// All learnable tensors. `bilinear_w` starts at zero so the first
/// contrastive loss is exactly ln(B) regardless of the other weights, a
/// built-in self-test of the loss plumbing.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real> {
    pub config: ModelConfig,
    pub conv_kernels: Vec<Tensor<F>>,
    pub conv_biases: Vec<Tensor<F>>,
    pub proj_weight: Tensor<F>,
    pub proj_bias: Tensor<F>,
    pub bilinear_w: Tensor<F>,
    pub cls_weight: Tensor<F>,
    pub cls_bias: Tensor<F>,
}

/// Fan-in-scaled uniform draw: U(-1/sqrt(fan_in), 1/sqrt(fan_in)). Drawn in
/// f64 and narrowed, so f32 and f64 models share the same init sequence.
fn fan_in_uniform<F: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| F::from_f64(rng.random_range(-bound..bound)))
}

impl<F: Real> ModelParams<F> {
    /// Deterministic initialization from a seed. Biases and the bilinear
    /// matrix start at zero; weights use fan-in-scaled uniform draws in the
    /// order: conv kernels (block by block), projection, classifier.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut conv_kernels = Vec::new();
        let mut conv_biases = Vec::new();
        let mut in_ch = 1;
        for &out_ch in &config.conv_channels {
            let fan_in = in_ch * 9;
            conv_kernels.push(fan_in_uniform(vec![out_ch, in_ch, 3, 3], fan_in, &mut rng));
            conv_biases.push(Tensor::zeros(vec![out_ch]));
            in_ch = out_ch;
        }

        let h_dim = config.h_dim();
        let proj_weight = fan_in_uniform(vec![h_dim, config.proj_dim], h_dim, &mut rng);
        let proj_bias = Tensor::zeros(vec![config.proj_dim]);
        let bilinear_w = Tensor::zeros(vec![config.proj_dim, config.proj_dim]);
        let cls_weight = fan_in_uniform(vec![h_dim, config.n_classes], h_dim, &mut rng);
        let cls_bias = Tensor::zeros(vec![config.n_classes]);

        Ok(Self {
            config,
            conv_kernels,
            conv_biases,
            proj_weight,
            proj_bias,
            bilinear_w,
            cls_weight,
            cls_bias,
        })
    }

    /// Replaces the classifier head with a fresh draw; used when a
    /// pretrained encoder is reused for a new downstream task.
    pub fn reinit_classifier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h_dim = self.config.h_dim();
        self.cls_weight = fan_in_uniform(vec![h_dim, self.config.n_classes], h_dim, &mut rng);
        self.cls_bias = Tensor::zeros(vec![self.config.n_classes]);
    }

    /// Stable name/tensor listing; the checkpoint and optimizer orderings
    /// both derive from this.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.conv_kernels.iter().zip(&self.conv_biases).enumerate() {
            out.push((format!("enc.{i}.kernel"), k));
            out.push((format!("enc.{i}.bias"), b));
        }
        out.push(("proj.weight".into(), &self.proj_weight));
        out.push(("proj.bias".into(), &self.proj_bias));
        out.push(("bilinear.w".into(), &self.bilinear_w));
        out.push(("cls.weight".into(), &self.cls_weight));
        out.push(("cls.bias".into(), &self.cls_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self
            .conv_kernels
            .iter_mut()
            .zip(self.conv_biases.iter_mut())
            .enumerate()
        {
            out.push((format!("enc.{i}.kernel"), k));
            out.push((format!("enc.{i}.bias"), b));
        }
        out.push(("proj.weight".into(), &mut self.proj_weight));
        out.push(("proj.bias".into(), &mut self.proj_bias));
        out.push(("bilinear.w".into(), &mut self.bilinear_w));
        out.push(("cls.weight".into(), &mut self.cls_weight));
        out.push(("cls.bias".into(), &mut self.cls_bias));
        out
    }
}

/// Which parameter group receives gradients in a given phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableSet {
    /// Encoder, projection, and bilinear matrix (contrastive pretraining).
    Pretrain,
    /// Classifier head only (linear probe; encoder stays frozen).
    ClassifierOnly,
    /// Encoder and classifier (finetuning).
    EncoderAndClassifier,
    /// Nothing trainable (evaluation).
    None,
}

impl TrainableSet {
    fn encoder(self) -> bool {
        matches!(self, TrainableSet::Pretrain | TrainableSet::EncoderAndClassifier)
    }

    fn projection(self) -> bool {
        matches!(self, TrainableSet::Pretrain)
    }

    fn classifier(self) -> bool {
        matches!(
            self,
            TrainableSet::ClassifierOnly | TrainableSet::EncoderAndClassifier
        )
    }

    /// Whether the named tensor (per [`ModelParams::named_tensors`])
    /// receives gradients under this set.
    pub fn includes(self, name: &str) -> bool {
        if name.starts_with("enc.") {
            self.encoder()
        } else if name.starts_with("proj.") || name == "bilinear.w" {
            self.projection()
        } else {
            self.classifier()
        }
    }
}

/// Model parameters bound onto a tape for one forward/backward pass.
pub struct BoundModel {
    conv: Vec<(Var, Var)>,
    proj_weight: Var,
    proj_bias: Var,
    bilinear_w: Var,
    cls_weight: Var,
    cls_bias: Var,
    trainable: Vec<(String, Var)>,
    config: ModelConfig,
}

/// Binds every parameter tensor onto `tape`, marking the `trainable` subset
/// as requiring gradients.
pub fn bind<F: Real>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    trainable: TrainableSet,
) -> BoundModel {
    let mut tracked = Vec::new();
    let mut vars = Vec::new();
    for (name, tensor) in params.named_tensors() {
        let wants_grad = trainable.includes(&name);
        let var = tape.input(tensor.clone(), wants_grad);
        if wants_grad {
            tracked.push((name, var));
        }
        vars.push(var);
    }
    let n_blocks = params.conv_kernels.len();
    let conv: Vec<(Var, Var)> = (0..n_blocks).map(|i| (vars[2 * i], vars[2 * i + 1])).collect();
    let [proj_weight, proj_bias, bilinear_w, cls_weight, cls_bias] =
        vars[2 * n_blocks..].try_into().expect("five tail tensors");
    BoundModel {
        conv,
        proj_weight,
        proj_bias,
        bilinear_w,
        cls_weight,
        cls_bias,
        trainable: tracked,
        config: params.config.clone(),
    }
}

impl BoundModel {
    /// Name/handle pairs of the tensors that will receive gradients, in the
    /// same order as [`ModelParams::named_tensors`] filters to.
    pub fn trainable(&self) -> &[(String, Var)] {
        &self.trainable
    }

    /// Encoder: conv blocks then global mean pool. `B x 1 x frames x mels`
    /// in, `B x h_dim` out.
    pub fn encoder_forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        let expect = [
            shape.first().copied().unwrap_or(0),
            1,
            self.config.input_frames,
            self.config.input_mels,
        ];
        if shape.len() != 4 || shape[1..] != expect[1..] {
            return Err(Error::ShapeMismatch {
                op: "encoder_forward",
                lhs: shape.to_vec(),
                rhs: expect.to_vec(),
            });
        }
        let mut cur = x;
        for &(kernel, bias) in &self.conv {
            cur = tape.conv2d(cur, kernel, bias, 1)?;
            cur = tape.relu(cur);
            cur = tape.mean_pool2(cur)?;
        }
        tape.global_mean_pool(cur)
    }

    /// Projection head: `Z = tanh(H . Wg + bg)`.
    pub fn project<F: Real>(&self, tape: &mut Tape<F>, h: Var) -> Result<Var> {
        let pre = tape.matmul(h, self.proj_weight)?;
        let pre = tape.add_bias(pre, self.proj_bias)?;
        Ok(tape.tanh(pre))
    }

    /// Bilinear similarity matrix: `S[i][j] = Z[i]^T . W . Z'[j]`.
    pub fn bilinear_similarity<F: Real>(
        &self,
        tape: &mut Tape<F>,
        z: Var,
        z_prime: Var,
    ) -> Result<Var> {
        let zw = tape.matmul(z, self.bilinear_w)?;
        let zt = tape.transpose(z_prime)?;
        tape.matmul(zw, zt)
    }

    /// Linear classifier on the embedding; no activation (the trainer
    /// applies softmax cross-entropy).
    pub fn classifier_forward<F: Real>(&self, tape: &mut Tape<F>, h: Var) -> Result<Var> {
        let logits = tape.matmul(h, self.cls_weight)?;
        tape.add_bias(logits, self.cls_bias)
    }
}

/// Contrastive loss over a square similarity matrix: softmax cross-entropy
/// of each row against its own index (anchor i must pick positive i out of
/// the batch), averaged over rows. Anchor-to-positive direction only.
pub fn contrastive_loss<F: Real>(tape: &mut Tape<F>, s: Var) -> Result<Var> {
    let shape = tape.shape(s);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::NotSquare(shape.to_vec()));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::BatchTooSmall { got: b, need: 2 });
    }
    let targets: Vec<usize> = (0..b).collect();
    let losses = tape.softmax_cross_entropy(s, &targets)?;
    Ok(tape.scalar_mean(losses))
}

/// Step size for the composed-graph finite-difference check. Larger than
/// the primitive-op default because central-difference noise scales as
/// 1/eps and this graph is deep; the fixture search below keeps truncation
/// and kink effects out of the picture at this eps.
pub const COMPOSED_EPS: f64 = 1e-4;

/// A coordinate perturbation of ±eps shifts any relu pre-activation by at
/// most eps (inputs are bounded by 1), so this margin guarantees no
/// finite-difference evaluation crosses the kink.
const KINK_MARGIN: f64 = 4.0 * COMPOSED_EPS;

/// Gradient coordinates below this are indistinguishable from the
/// difference quotient's rounding noise (about 1e-12 absolute at this eps),
/// so the fixture search rejects evaluation points that have any.
const GRAD_FLOOR: f64 = 3e-7;

/// A deterministic, well-conditioned evaluation point for checking the full
/// encoder -> projection -> bilinear -> contrastive-loss gradient against
/// central finite differences.
///
/// Differentiability is only piecewise (relu), and a max-relative-error
/// comparison is meaningless on coordinates whose true gradient sits at the
/// oracle's noise floor. The fixture is therefore the first seed, counting
/// up from zero, whose evaluation point (a) keeps every relu pre-activation
/// at least [`KINK_MARGIN`] away from zero and (b) has no parameter
/// gradient smaller than [`GRAD_FLOOR`]. Both properties are re-derived at
/// runtime, so the choice is reproducible rather than hard-coded.
#[derive(Debug, Clone)]
pub struct ComposedFixture {
    pub params: ModelParams<f64>,
    pub anchors: Tensor<f64>,
    pub positives: Tensor<f64>,
    pub seed: u64,
}

/// Tiny dims for the composed check: one conv block (h_dim 8), 8-wide
/// projection, batch of 4.
fn composed_config() -> ModelConfig {
    ModelConfig {
        conv_channels: vec![8],
        input_frames: 12,
        input_mels: 10,
        proj_dim: 8,
        n_classes: 2,
    }
}

const COMPOSED_BATCH: usize = 4;

/// The full pretraining loss as a function of the parameter vector
/// `[kernel0, bias0, ..., proj.weight, proj.bias, bilinear.w]`, wired
/// directly from tape ops so finite differencing can re-evaluate it.
fn composed_loss<F: Real>(
    tape: &mut Tape<F>,
    p: &[Var],
    anchors: &Tensor<F>,
    positives: &Tensor<F>,
) -> Result<Var> {
    let n_blocks = (p.len() - 3) / 2;
    let encode = |tape: &mut Tape<F>, x: Tensor<F>| -> Result<Var> {
        let mut cur = tape.constant(x);
        for block in 0..n_blocks {
            cur = tape.conv2d(cur, p[2 * block], p[2 * block + 1], 1)?;
            cur = tape.relu(cur);
            cur = tape.mean_pool2(cur)?;
        }
        let h = tape.global_mean_pool(cur)?;
        let z = tape.matmul(h, p[p.len() - 3])?;
        let z = tape.add_bias(z, p[p.len() - 2])?;
        Ok(tape.tanh(z))
    };
    let za = encode(tape, anchors.clone())?;
    let zp = encode(tape, positives.clone())?;
    let zw = tape.matmul(za, p[p.len() - 1])?;
    let zt = tape.transpose(zp)?;
    let s = tape.matmul(zw, zt)?;
    contrastive_loss(tape, s)
}

/// Parameter vector for the composed check, in [`composed_loss`] order. The
/// bilinear matrix gets a nonzero draw; at its zero init the loss is
/// constant in everything upstream and the check would be vacuous.
fn composed_tensors(params: &ModelParams<f64>, seed: u64) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    for (k, b) in params.conv_kernels.iter().zip(&params.conv_biases) {
        out.push(k.clone());
        out.push(b.clone());
    }
    out.push(params.proj_weight.clone());
    out.push(params.proj_bias.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let d = params.config.proj_dim;
    out.push(Tensor::from_fn(vec![d, d], |_| rng.random_range(-0.5..0.5)));
    out
}

/// Smallest |conv pre-activation| over all blocks and both inputs.
fn relu_kink_margin(
    config: &ModelConfig,
    tensors: &[Tensor<f64>],
    inputs: &[&Tensor<f64>],
) -> f64 {
    let mut margin = f64::INFINITY;
    for &input in inputs {
        let mut tape: Tape<f64> = Tape::new();
        let mut cur = tape.constant(input.clone());
        for block in 0..config.conv_channels.len() {
            let kernel = tape.constant(tensors[2 * block].clone());
            let bias = tape.constant(tensors[2 * block + 1].clone());
            let pre = tape.conv2d(cur, kernel, bias, 1).expect("validated dims");
            for v in tape.data(pre) {
                margin = margin.min(v.abs());
            }
            let r = tape.relu(pre);
            cur = tape.mean_pool2(r).expect("validated dims");
        }
    }
    margin
}

/// Smallest |dL/dtheta| over every parameter coordinate.
fn min_abs_gradient(
    tensors: &[Tensor<f64>],
    anchors: &Tensor<f64>,
    positives: &Tensor<f64>,
) -> Result<f64> {
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.input(t.clone(), true)).collect();
    let loss = composed_loss(&mut tape, &vars, anchors, positives)?;
    let mut grads = tape.backward(loss)?;
    let mut min_g = f64::INFINITY;
    for var in vars {
        let g = grads.take(var).ok_or(Error::DisconnectedGraph)?;
        for v in g {
            min_g = min_g.min(v.abs());
        }
    }
    Ok(min_g)
}

/// Finds the composed-check fixture (see [`ComposedFixture`]).
pub fn composed_fixture() -> Result<ComposedFixture> {
    let config = composed_config();
    for seed in 0..100_000u64 {
        let params = ModelParams::<f64>::init(config.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(3).wrapping_add(1));
        let anchors = Tensor::from_fn(
            vec![COMPOSED_BATCH, 1, config.input_frames, config.input_mels],
            |_| rng.random_range(-1.0..1.0),
        );
        let positives = Tensor::from_fn(
            vec![COMPOSED_BATCH, 1, config.input_frames, config.input_mels],
            |_| rng.random_range(-1.0..1.0),
        );
        let tensors = composed_tensors(&params, seed);
        if relu_kink_margin(&config, &tensors, &[&anchors, &positives]) < KINK_MARGIN {
            continue;
        }
        if min_abs_gradient(&tensors, &anchors, &positives)? < GRAD_FLOOR {
            continue;
        }
        let mut params = params;
        params.bilinear_w = tensors.last().expect("nonempty").clone();
        return Ok(ComposedFixture { params, anchors, positives, seed });
    }
    Err(Error::InvalidConfig(
        "no well-conditioned composed-check fixture in 100000 seeds".into(),
    ))
}

/// Checks the full pretraining gradient (batch 4, h_dim 8, proj_dim 8,
/// double precision) against central finite differences at [`COMPOSED_EPS`].
pub fn composed_graph_check() -> Result<crate::tensor::gradcheck::CheckReport> {
    let fixture = composed_fixture()?;
    let tensors = composed_tensors(&fixture.params, fixture.seed);
    let (anchors, positives) = (fixture.anchors, fixture.positives);
    let max_rel_err = crate::tensor::gradcheck::grad_check(
        move |tape, p| composed_loss(tape, p, &anchors, &positives),
        &tensors,
        COMPOSED_EPS,
    )?;
    Ok(crate::tensor::gradcheck::CheckReport {
        name: "composed_graph",
        max_rel_err,
        tolerance: 1e-5,
    })
}

/// Packs spectrograms into a `B x 1 x frames x mels` input tensor.
pub fn mels_to_tensor<F: Real>(mels: &[MelSpectrogram]) -> Result<Tensor<F>> {
    let first = mels.first().ok_or(Error::BatchTooSmall { got: 0, need: 1 })?;
    let (frames, n_mels) = (first.n_frames(), first.n_mels());
    let mut data = Vec::with_capacity(mels.len() * frames * n_mels);
    for m in mels {
        if m.n_frames() != frames || m.n_mels() != n_mels {
            return Err(Error::ShapeMismatch {
                op: "mels_to_tensor",
                lhs: vec![m.n_frames(), m.n_mels()],
                rhs: vec![frames, n_mels],
            });
        }
        data.extend(m.values().iter().map(|&v| F::from_f64(v)));
    }
    Tensor::new(vec![mels.len(), 1, frames, n_mels], data)
}
