//! A small multi-task network trained with hand-written backpropagation.
//!
//! The network is a two-layer ReLU trunk feeding three sigmoid heads:
//! abnormality classes, spatial classes and a low-resolution organ mask
//! decoder. All parameters live in one flat vector; [`Layout`] records where
//! each block starts.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{composite_loss, CompositeConfig, LossResult, Predictions, Targets};
use crate::metrics::per_class_auc;

pub const DEFAULT_HIDDEN: usize = 64;
/// Side length of the decoder's output masks.
pub const DECODER_SIDE: usize = 16;

const STREAM_INIT: u64 = 10;
const STREAM_SHUFFLE: u64 = 11;

/// Sizes of the network's layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Spatial head width; 0 drops the head.
    pub spatial: usize,
    /// Decoder width; 0 drops the head.
    pub segmentation: usize,
}

/// Parameter blocks in storage order. Weight blocks are `out x in`, row
/// major, each followed by its bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Trunk1,
    Trunk2,
    Abnormality,
    Spatial,
    Decoder,
}

const BLOCKS: [Block; 5] = [Block::Trunk1, Block::Trunk2, Block::Abnormality, Block::Spatial, Block::Decoder];

impl Layout {
    fn shape(&self, block: Block) -> (usize, usize) {
        match block {
            Block::Trunk1 => (self.hidden, self.inputs),
            Block::Trunk2 => (self.hidden, self.hidden),
            Block::Abnormality => (self.classes, self.hidden),
            Block::Spatial => (self.spatial, self.hidden),
            Block::Decoder => (self.segmentation, self.hidden),
        }
    }

    /// Offset of the block's weights; its bias follows at `offset + out * in`.
    fn offset(&self, block: Block) -> usize {
        BLOCKS
            .iter()
            .take_while(|b| **b != block)
            .map(|b| {
                let (o, i) = self.shape(*b);
                o * i + o
            })
            .sum()
    }

    pub fn n_params(&self) -> usize {
        BLOCKS
            .iter()
            .map(|b| {
                let (o, i) = self.shape(*b);
                o * i + o
            })
            .sum()
    }

    fn validate(&self) -> Result<()> {
        if self.inputs == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(Error::Invalid(format!("layout {self:?} has an empty layer")));
        }
        Ok(())
    }
}

/// Which optional heads a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Heads {
    pub spatial: bool,
    pub segmentation: bool,
}

impl Heads {
    pub fn for_loss(config: &CompositeConfig) -> Self {
        Self {
            spatial: config.uses_spatial(),
            segmentation: config.uses_segmentation(),
        }
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    pub predictions: Predictions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub layout: Layout,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step_count: u64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ModelState {
    /// All-zero parameters and moments.
    pub fn zeros(layout: Layout) -> Result<Self> {
        layout.validate()?;
        let n = layout.n_params();
        Ok(Self {
            layout,
            params: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        })
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn initialize(layout: Layout, seed: u64) -> Result<Self> {
        let mut state = Self::zeros(layout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_INIT);
        for block in BLOCKS {
            let (o, i) = layout.shape(block);
            if o * i == 0 {
                continue;
            }
            let limit = (6.0 / (o + i) as f64).sqrt();
            let off = layout.offset(block);
            for w in &mut state.params[off..off + o * i] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(state)
    }

    pub fn from_params(layout: Layout, params: Vec<f64>) -> Result<Self> {
        let mut state = Self::zeros(layout)?;
        if params.len() != state.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters for a layout needing {}",
                params.len(),
                state.params.len()
            )));
        }
        state.params = params;
        Ok(state)
    }

    fn weights(&self, block: Block) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (o, i) = self.layout.shape(block);
        let off = self.layout.offset(block);
        let w = ArrayView2::from_shape((o, i), &self.params[off..off + o * i]).expect("layout shape");
        let b = ArrayView1::from(&self.params[off + o * i..off + o * i + o]);
        (w, b)
    }

    /// Mutable views of one block inside a gradient vector.
    fn grad_block<'a>(&self, grad: &'a mut [f64], block: Block) -> (ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>) {
        let (o, i) = self.layout.shape(block);
        let off = self.layout.offset(block);
        let (w, b) = grad[off..off + o * i + o].split_at_mut(o * i);
        (
            ArrayViewMut2::from_shape((o, i), w).expect("layout shape"),
            ArrayViewMut1::from(b),
        )
    }

    fn head_output(&self, block: Block, h: &Array2<f64>) -> Array2<f64> {
        let (w, b) = self.weights(block);
        let mut z = h.dot(&w.t());
        z += &b;
        z.mapv_inplace(sigmoid);
        z
    }

    fn diagnostics(&self) -> String {
        let non_finite = self.params.iter().filter(|p| !p.is_finite()).count();
        let max_abs = self.params.iter().filter(|p| p.is_finite()).fold(0.0f64, |m, p| m.max(p.abs()));
        format!(
            "{non_finite} non-finite of {} parameters, max |finite parameter| {max_abs:e}, step {}",
            self.params.len(),
            self.step_count
        )
    }

    /// Runs the network on a `B x inputs` batch.
    pub fn forward(&self, input: ArrayView2<'_, f64>, heads: Heads) -> Result<ForwardCache> {
        if input.ncols() != self.layout.inputs {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                input.ncols(),
                self.layout.inputs
            )));
        }
        if heads.spatial && self.layout.spatial == 0 || heads.segmentation && self.layout.segmentation == 0 {
            return Err(Error::Invalid(format!("requested heads {heads:?} missing from layout")));
        }
        let (w1, b1) = self.weights(Block::Trunk1);
        let mut z1 = input.dot(&w1.t());
        z1 += &b1;
        let h1 = z1.mapv(|v| v.max(0.0));
        let (w2, b2) = self.weights(Block::Trunk2);
        let mut z2 = h1.dot(&w2.t());
        z2 += &b2;
        let h2 = z2.mapv(|v| v.max(0.0));
        let predictions = Predictions {
            abnormality: self.head_output(Block::Abnormality, &h2),
            spatial: heads.spatial.then(|| self.head_output(Block::Spatial, &h2)),
            segmentation: heads.segmentation.then(|| self.head_output(Block::Decoder, &h2)),
        };
        let outputs = [Some(&predictions.abnormality), predictions.spatial.as_ref(), predictions.segmentation.as_ref()];
        if outputs.into_iter().flatten().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("forward activation ({})", self.diagnostics())));
        }
        Ok(ForwardCache {
            input: input.to_owned(),
            z1,
            h1,
            z2,
            h2,
            predictions,
        })
    }

    pub fn predict(&self, input: ArrayView2<'_, f64>, heads: Heads) -> Result<Predictions> {
        Ok(self.forward(input, heads)?.predictions)
    }

    /// Backpropagates loss gradients taken with respect to the predicted
    /// probabilities into a full parameter gradient.
    pub fn backward(&self, cache: &ForwardCache, loss: &LossResult) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        let (f, hidden) = cache.h2.dim();
        let mut d_h2 = Array2::<f64>::zeros((f, hidden));
        let heads = [
            (Block::Abnormality, Some(&cache.predictions.abnormality), loss.grad_abnormality.as_ref()),
            (Block::Spatial, cache.predictions.spatial.as_ref(), loss.grad_spatial.as_ref()),
            (Block::Decoder, cache.predictions.segmentation.as_ref(), loss.grad_segmentation.as_ref()),
        ];
        for (block, out, g) in heads {
            let (Some(out), Some(g)) = (out, g) else { continue };
            if out.dim() != g.dim() {
                return Err(Error::Shape(format!("head output {:?} vs gradient {:?}", out.dim(), g.dim())));
            }
            // through the sigmoid
            let mut dz = g.clone();
            Zip::from(&mut dz).and(out).for_each(|d, &p| *d *= p * (1.0 - p));
            let (w, _) = self.weights(block);
            d_h2 += &dz.dot(&w);
            let (mut gw, mut gb) = self.grad_block(&mut grad, block);
            gw.assign(&dz.t().dot(&cache.h2));
            gb.assign(&dz.sum_axis(Axis(0)));
        }
        let mut d_z2 = d_h2;
        Zip::from(&mut d_z2).and(&cache.z2).for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0
            }
        });
        let (w2, _) = self.weights(Block::Trunk2);
        let mut d_z1 = d_z2.dot(&w2);
        Zip::from(&mut d_z1).and(&cache.z1).for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0
            }
        });
        {
            let (mut gw, mut gb) = self.grad_block(&mut grad, Block::Trunk2);
            gw.assign(&d_z2.t().dot(&cache.h1));
            gb.assign(&d_z2.sum_axis(Axis(0)));
        }
        {
            let (mut gw, mut gb) = self.grad_block(&mut grad, Block::Trunk1);
            gw.assign(&d_z1.t().dot(&cache.input));
            gb.assign(&d_z1.sum_axis(Axis(0)));
        }
        Ok(grad)
    }

    /// Summed composite loss of a batch and its parameter gradient.
    pub fn loss_and_gradient(
        &self,
        input: ArrayView2<'_, f64>,
        targets: &Targets,
        config: &CompositeConfig,
    ) -> Result<(f64, Vec<f64>)> {
        let cache = self.forward(input, Heads::for_loss(config))?;
        let loss = composite_loss(&cache.predictions, targets, config)?;
        let grad = self.backward(&cache, &loss)?;
        Ok((loss.value, grad))
    }

    /// Checkpoint layout, little endian: magic `NLCK`, format version (u32),
    /// the five layout sizes and the step count (u64 each), then the
    /// parameters, first moments and second moments as f64.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let l = &self.layout;
        for v in [l.inputs, l.hidden, l.classes, l.spatial, l.segmentation] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.step_count.to_le_bytes())?;
        for vec in [&self.params, &self.adam_m, &self.adam_v] {
            for v in vec.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |what: &str| Error::Invalid(format!("checkpoint: {what}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
            Ok(u64::from_le_bytes(b8))
        };
        let mut sizes = [0usize; 5];
        for s in sizes.iter_mut() {
            *s = usize::try_from(next_u64(&mut r)?).map_err(|_| bad("layout size overflow"))?;
        }
        let step_count = next_u64(&mut r)?;
        let layout = Layout {
            inputs: sizes[0],
            hidden: sizes[1],
            classes: sizes[2],
            spatial: sizes[3],
            segmentation: sizes[4],
        };
        let mut state = Self::zeros(layout)?;
        state.step_count = step_count;
        for vec in [&mut state.params, &mut state.adam_m, &mut state.adam_v] {
            for v in vec.iter_mut() {
                r.read_exact(&mut b8).map_err(|_| bad("truncated body"))?;
                *v = f64::from_le_bytes(b8);
            }
        }
        if r.read(&mut b8).map_err(|_| bad("read failure"))? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NLCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. The state is left untouched if any
/// updated value would be non-finite.
pub fn adam_step(state: &mut ModelState, grad: &[f64], learning_rate: f64, config: &AdamConfig) -> Result<()> {
    if grad.len() != state.params.len() {
        return Err(Error::Shape(format!(
            "gradient of length {} for {} parameters",
            grad.len(),
            state.params.len()
        )));
    }
    let t = state.step_count + 1;
    let bc1 = 1.0 - config.beta1.powf(t as f64);
    let bc2 = 1.0 - config.beta2.powf(t as f64);
    let n = grad.len();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for k in 0..n {
        let g = grad[k];
        let mk = config.beta1 * state.adam_m[k] + (1.0 - config.beta1) * g;
        let vk = config.beta2 * state.adam_v[k] + (1.0 - config.beta2) * g * g;
        let pk = state.params[k] - learning_rate * (mk / bc1) / ((vk / bc2).sqrt() + config.epsilon);
        if !pk.is_finite() || !vk.is_finite() {
            return Err(Error::NonFinite(format!(
                "Adam update of parameter {k} at step {t} (gradient {g:e}, {})",
                state.diagnostics()
            )));
        }
        m.push(mk);
        v.push(vk);
        p.push(pk);
    }
    state.adam_m = m;
    state.adam_v = v;
    state.params = p;
    state.step_count = t;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// The learning rate is divided by this factor on a plateau.
    pub plateau_factor: f64,
    /// Epochs without validation improvement before the rate drops.
    pub plateau_patience: usize,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            batch_size: 128,
            max_epochs: 30,
            plateau_factor: 10.0,
            plateau_patience: 3,
            early_stop_patience: 6,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.adam.beta1 > 0.0
            && self.adam.beta2 > 0.0
            && self.adam.epsilon > 0.0
            && self.plateau_factor > 0.0
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.plateau_patience > 0
            && self.early_stop_patience > 0
            && self.hidden > 0;
        if !positive {
            return Err(Error::Invalid(format!("training settings must be positive: {self:?}")));
        }
        if self.batch_size > n_train {
            return Err(Error::Invalid(format!(
                "batch size {} exceeds {n_train} training samples",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Features and supervision for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub features: Array2<f64>,
    pub targets: Targets,
    /// Noise-free labels, when known, for evaluation only.
    pub clean_labels: Option<Array2<u8>>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            targets: Targets {
                labels: self.targets.labels.select(Axis(0), rows),
                mask: self.targets.mask.select(Axis(0), rows),
                spatial: self.targets.spatial.as_ref().map(|s| s.select_rows(rows)),
                segmentation: self.targets.segmentation.as_ref().map(|s| s.select(Axis(0), rows)),
            },
            clean_labels: self.clean_labels.as_ref().map(|c| c.select(Axis(0), rows)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean per-sample composite loss over the epoch's batches.
    pub train_loss: f64,
    pub validation_loss: f64,
    /// Validation AUC per class against the training-style (possibly noisy) labels.
    pub auc_noisy: Vec<Option<f64>>,
    /// Validation AUC per class against clean labels, when available.
    pub auc_clean: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub class_names: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop_reason: String,
}

fn fmt_auc(a: &Option<f64>) -> String {
    a.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["epoch".to_string(), "lr".into(), "train_loss".into(), "val_loss".into()];
        header.extend(self.class_names.iter().map(|c| format!("auc_noisy:{c}")));
        header.extend(self.class_names.iter().map(|c| format!("auc_clean:{c}")));
        out.write_record(&header).map_err(crate::labels::csv_err)?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.learning_rate.to_string(),
                e.train_loss.to_string(),
                e.validation_loss.to_string(),
            ];
            row.extend(e.auc_noisy.iter().map(fmt_auc));
            match &e.auc_clean {
                Some(c) => row.extend(c.iter().map(fmt_auc)),
                None => row.extend(std::iter::repeat_n("NA".to_string(), self.class_names.len())),
            }
            out.write_record(&row).map_err(crate::labels::csv_err)?;
        }
        out.flush().map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn evaluation_loss(model: &ModelState, data: &SplitData, config: &CompositeConfig) -> Result<f64> {
    let preds = model.predict(data.features.view(), Heads::for_loss(config))?;
    Ok(composite_loss(&preds, &data.targets, config)?.value / data.len() as f64)
}

/// Trains with mini-batch Adam, dropping the learning rate on validation
/// plateaus and stopping early. Returns the parameters of the epoch with the
/// lowest validation loss. `log` is filled as training proceeds, so it
/// survives a divergence error.
pub fn train(
    train_data: &SplitData,
    validation: &SplitData,
    loss: &CompositeConfig,
    config: &TrainConfig,
    class_names: &[String],
    log: &mut TrainingLog,
) -> Result<ModelState> {
    config.validate(train_data.len())?;
    if validation.is_empty() {
        return Err(Error::Invalid("empty validation split".into()));
    }
    let heads = Heads::for_loss(loss);
    let layout = Layout {
        inputs: train_data.features.ncols(),
        hidden: config.hidden,
        classes: train_data.targets.labels.ncols(),
        spatial: if heads.spatial { crate::labels::SPATIAL_CLASS_COUNT } else { 0 },
        segmentation: match (&train_data.targets.segmentation, heads.segmentation) {
            (Some(s), true) => s.ncols(),
            _ => 0,
        },
    };
    let mut model = ModelState::initialize(layout, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_SHUFFLE);
    log.class_names = class_names.to_vec();
    log.epochs.clear();
    log.best_epoch = None;
    log.stop_reason = "max_epochs".into();

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut lr = config.learning_rate;
    let mut best: Option<(f64, ModelState)> = None;
    let mut since_best = 0;
    let mut since_drop = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = train_data.select_rows(chunk);
            let (value, mut grad) = model.loss_and_gradient(batch.features.view(), &batch.targets, loss)?;
            if !value.is_finite() {
                log.stop_reason = "diverged".into();
                return Err(Error::Diverged { epoch, loss: value });
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            total += value;
            adam_step(&mut model, &grad, lr, &config.adam)?;
        }
        let validation_loss = match evaluation_loss(&model, validation, loss) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                log.stop_reason = "diverged".into();
                return Err(Error::Diverged { epoch, loss: v });
            }
            Err(Error::NonFinite(_)) => {
                log.stop_reason = "diverged".into();
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
            Err(e) => return Err(e),
        };
        let preds = model.predict(validation.features.view(), Heads::default())?;
        let auc_noisy = per_class_auc(preds.abnormality.view(), validation.targets.labels.view())?;
        let auc_clean = match &validation.clean_labels {
            Some(c) => Some(per_class_auc(preds.abnormality.view(), c.view())?),
            None => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: total / train_data.len() as f64,
            validation_loss,
            auc_noisy,
            auc_clean,
        });
        if best.as_ref().is_none_or(|(b, _)| validation_loss < *b) {
            best = Some((validation_loss, model.clone()));
            log.best_epoch = Some(epoch);
            since_best = 0;
            since_drop = 0;
        } else {
            since_best += 1;
            since_drop += 1;
            if since_best >= config.early_stop_patience {
                log.stop_reason = "early_stop".into();
                break;
            }
            if since_drop >= config.plateau_patience {
                lr /= config.plateau_factor;
                since_drop = 0;
            }
        }
    }
    Ok(best.map(|(_, m)| m).unwrap_or(model))
}

/// Block-mean downsampling of `channels` stacked `side x side` binary masks
/// to `out_side x out_side`, thresholded at one half.
pub fn downsample_masks(masks: &[u8], side: usize, channels: usize, out_side: usize) -> Result<Vec<f64>> {
    if masks.len() != channels * side * side || out_side == 0 || !side.is_multiple_of(out_side) {
        return Err(Error::Shape(format!(
            "{} mask values for {channels} channels of {side}x{side} -> {out_side}",
            masks.len()
        )));
    }
    let k = side / out_side;
    let mut out = Vec::with_capacity(channels * out_side * out_side);
    for c in 0..channels {
        for by in 0..out_side {
            for bx in 0..out_side {
                let mut sum = 0usize;
                for y in by * k..(by + 1) * k {
                    for x in bx * k..(bx + 1) * k {
                        sum += masks[c * side * side + y * side + x] as usize;
                    }
                }
                out.push(f64::from(u8::from(2 * sum >= k * k)));
            }
        }
    }
    Ok(out)
}

/// Bilinear upsampling of a `side x side` map to `out_side x out_side`,
/// sampling at pixel centers with edge clamping.
pub fn upsample_bilinear(map: ArrayView1<'_, f64>, side: usize, out_side: usize) -> Array1<f64> {
    let scale = side as f64 / out_side as f64;
    let at = |x: usize, y: usize| map[y * side + x];
    let mut out = Array1::zeros(out_side * out_side);
    for y in 0..out_side {
        let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(side - 1);
        let ty = sy - y0 as f64;
        for x in 0..out_side {
            let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let tx = sx - x0 as f64;
            let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
            let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
            out[y * out_side + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Entries of `grad` belonging to one abnormality class's output weights,
/// followed by its bias.
pub fn abnormality_head_rows(state: &ModelState, grad: &[f64], class: usize) -> Vec<f64> {
    let (o, i) = state.layout.shape(Block::Abnormality);
    assert!(class < o);
    let off = state.layout.offset(Block::Abnormality);
    let mut out = grad[off + class * i..off + (class + 1) * i].to_vec();
    out.push(grad[off + o * i + class]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::ClassWeights;
    use ndarray::array;

    fn tiny() -> Layout {
        Layout {
            inputs: 3,
            hidden: 4,
            classes: 2,
            spatial: 0,
            segmentation: 0,
        }
    }

    #[test]
    fn zero_model_outputs_one_half() {
        let layout = Layout {
            spatial: 9,
            segmentation: 6,
            ..tiny()
        };
        let m = ModelState::zeros(layout).unwrap();
        let x = array![[0.3, -1.0, 2.0], [1.0, 1.0, 1.0]];
        let p = m.predict(x.view(), Heads { spatial: true, segmentation: true }).unwrap();
        for a in [&p.abnormality, p.spatial.as_ref().unwrap(), p.segmentation.as_ref().unwrap()] {
            assert!(a.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn param_count_matches_blocks() {
        let l = tiny();
        assert_eq!(l.n_params(), 3 * 4 + 4 + 4 * 4 + 4 + 2 * 4 + 2);
        assert_eq!(l.offset(Block::Trunk2), 16);
        assert_eq!(l.offset(Block::Abnormality), 36);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut m = ModelState::from_params(
            Layout {
                inputs: 1,
                hidden: 1,
                classes: 1,
                spatial: 0,
                segmentation: 0,
            },
            vec![0.0; 6],
        )
        .unwrap();
        let mut g = vec![0.0; 6];
        g[0] = 1.0;
        adam_step(&mut m, &g, 1e-3, &AdamConfig::default()).unwrap();
        assert!((m.params[0] + 1e-3).abs() < 1e-11);
        assert!(m.params[1..].iter().all(|&p| p == 0.0));
        assert_eq!(m.step_count, 1);
    }

    #[test]
    fn zero_gradient_only_counts_the_step() {
        let mut m = ModelState::initialize(tiny(), 3).unwrap();
        let before = m.params.clone();
        adam_step(&mut m, &vec![0.0; before.len()], 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(m.params, before);
        assert_eq!(m.step_count, 1);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut m = ModelState::initialize(tiny(), 3).unwrap();
        let before = m.clone();
        let mut g = vec![0.0; m.params.len()];
        g[2] = f64::INFINITY;
        assert!(matches!(
            adam_step(&mut m, &g, 1e-3, &AdamConfig::default()),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(m, before);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut m = ModelState::initialize(tiny(), 5).unwrap();
        let g: Vec<f64> = (0..m.params.len()).map(|k| k as f64 * 0.1 - 1.0).collect();
        adam_step(&mut m, &g, 1e-2, &AdamConfig::default()).unwrap();
        let mut bytes = Vec::new();
        m.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(ModelState::read_checkpoint(bytes.as_slice()).unwrap(), m);
        assert!(ModelState::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelState::read_checkpoint(bad.as_slice()).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(ModelState::read_checkpoint(long.as_slice()).is_err());
    }

    #[test]
    fn masks_downsample_by_majority() {
        let mut m = vec![0u8; 16];
        for y in 0..2 {
            for x in 0..2 {
                m[y * 4 + x] = 1;
            }
        }
        m[3] = 1;
        let d = downsample_masks(&m, 4, 1, 2).unwrap();
        assert_eq!(d, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_preserves_constants_and_corners() {
        let map = Array1::from_elem(16, 0.7);
        let up = upsample_bilinear(map.view(), 4, 8);
        assert!(up.iter().all(|v| (v - 0.7).abs() < 1e-15));
        let ramp = Array1::from_iter((0..4).flat_map(|_| (0..4).map(|x| x as f64)));
        let up = upsample_bilinear(ramp.view(), 4, 8);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[7], 3.0);
        assert!((up[3] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn training_rejects_oversized_batches() {
        let data = SplitData {
            features: Array2::zeros((4, 3)),
            targets: Targets {
                labels: Array2::zeros((4, 2)),
                mask: Array2::from_elem((4, 2), true),
                spatial: None,
                segmentation: None,
            },
            clean_labels: None,
        };
        let cfg = TrainConfig {
            batch_size: 5,
            ..TrainConfig::default()
        };
        let loss = CompositeConfig::baseline(ClassWeights::unit(2));
        let mut log = TrainingLog::default();
        assert!(matches!(
            train(&data, &data, &loss, &cfg, &["a".into(), "b".into()], &mut log),
            Err(Error::Invalid(_))
        ));
    }
}
