//! AdamW training with deterministic micro-batching, periodic evaluation and
//! resumable checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, visible_priors, Predictor, VisibleSource};
use crate::exec::Execution;
use crate::model::{loss, masks_to_tensor, Batch, LacNet, Model, ModelConfig};
use crate::nn::{ParamEntry, Real};
use crate::preprocess::{augment_mask, crop_mask, prepare_inputs, AugmentParams, CropInputs, CropSpec};
use crate::scene::{derive_seed, RgbdScene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Samples per gradient job; the batch gradient is the fixed-order sum
    /// of micro-batch gradients, so results do not depend on thread count.
    pub micro_batch: usize,
    pub total_iterations: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub augment: AugmentParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            micro_batch: 4,
            total_iterations: 5000,
            eval_every: 500,
            seed: 0,
            augment: AugmentParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return bad("batch_size and micro_batch must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if self.total_iterations > 0 && self.eval_every > self.total_iterations {
            return bad("eval_every must not exceed total_iterations");
        }
        self.augment.validate()
    }
}

/// First and second moment estimates of AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, cfg: &TrainConfig) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths");
    assert_eq!(params.len(), state.m.len(), "optimizer state length");
    state.step += 1;
    let t = state.step as i32;
    let lr = T::of(cfg.learning_rate);
    let decay = T::of(1.0 - cfg.learning_rate * cfg.weight_decay);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let eps = T::of(cfg.epsilon);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One training crop with its targets at crop resolution.
pub struct Sample {
    pub crop: CropInputs,
    pub visible: crate::Mask,
    pub amodal: crate::Mask,
}

/// Every `(scene, instance)` pair usable for training.
pub fn instance_index(scenes: &[RgbdScene]) -> Vec<(usize, usize)> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(s, scene)| {
            scene
                .instances
                .iter()
                .enumerate()
                .filter(|(_, i)| !i.visible_mask.is_empty())
                .map(move |(k, _)| (s, k))
        })
        .collect()
}

/// Draws slot `slot` of the batch for `iteration`; depends only on
/// `(seed, iteration, slot)`.
pub fn make_sample(
    scenes: &[RgbdScene],
    index: &[(usize, usize)],
    cfg: &TrainConfig,
    spec: &CropSpec,
    iteration: u64,
    slot: usize,
) -> Result<Sample> {
    let stream = derive_seed(derive_seed(cfg.seed, iteration), slot as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let (s, k) = index[rng.random_range(0..index.len())];
    let scene = &scenes[s];
    let inst = &scene.instances[k];
    let prior = augment_mask(&inst.visible_mask, &cfg.augment, &mut rng);
    let crop = prepare_inputs(scene, &prior, spec)?;
    let size = spec.output_size;
    Ok(Sample {
        visible: crop_mask(&inst.visible_mask, crop.bbox, size)?,
        amodal: crop_mask(&inst.amodal_mask, crop.bbox, size)?,
        crop,
    })
}

/// Batch loss and its gradient, accumulated over micro-batches in order.
pub fn batch_gradient(
    net: &LacNet,
    params: &[f32],
    samples: &[Sample],
    micro_batch: usize,
    exec: Execution,
) -> Result<(f64, Vec<f32>)> {
    let chunks: Vec<&[Sample]> = samples.chunks(micro_batch).collect();
    let total = samples.len() as f64;
    let parts = exec.try_map_range(chunks.len(), |c| {
        let chunk = chunks[c];
        let crops: Vec<CropInputs> = chunk.iter().map(|s| s.crop.clone()).collect();
        let batch = Batch::<f32>::from_crops(&crops)?;
        let visible = masks_to_tensor(&chunk.iter().map(|s| &s.visible).collect::<Vec<_>>());
        let amodal = masks_to_tensor(&chunk.iter().map(|s| &s.amodal).collect::<Vec<_>>());
        let (logits, cache) = net.forward(params, &batch)?;
        let (l, mut d) = loss(&logits, &visible, &amodal)?;
        let weight = chunk.len() as f64 / total;
        let w = weight as f32;
        d.visible.data.iter_mut().chain(d.amodal.data.iter_mut()).for_each(|g| *g *= w);
        let mut grads = vec![0.0f32; params.len()];
        net.backward(params, &cache, &d, &mut grads);
        Ok::<_, Error>((l * weight, grads))
    })?;
    let mut loss_sum = 0.0;
    let mut grads = vec![0.0f32; params.len()];
    for (l, g) in parts {
        loss_sum += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss_sum, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: u64,
    pub loss: f64,
    pub miou_full: Option<f64>,
    pub miou_occ: Option<f64>,
}

pub fn history_header() -> &'static str {
    "iteration,loss,miou_full,miou_occ"
}

impl HistoryRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!("{},{:.6},{},{}", self.iteration, self.loss, opt(self.miou_full), opt(self.miou_occ))
    }
}

/// Model parameters, optimizer state and the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Completed iterations.
    pub step: u64,
    pub best_miou_occ: Option<f64>,
    pub params: Vec<f32>,
    pub adam: AdamState<f32>,
}

const MAGIC: &[u8; 8] = b"LACNETCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    best_miou_occ: Option<f64>,
    adam_step: u64,
    parameter_count: usize,
    tensors: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.model_config.clone(), self.params.clone())
    }

    /// Layout: magic, version (u32 LE), header length (u64 LE), JSON header,
    /// then parameters, first moments and second moments as f32 LE.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = LacNet::new(self.model_config.clone())?;
        let header = Header {
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            best_miou_occ: self.best_miou_occ,
            adam_step: self.adam.step,
            parameter_count: self.params.len(),
            tensors: net.layout().entries().to_vec(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 12 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for buf in [&self.params, &self.adam.m, &self.adam.v] {
            for v in buf.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |m: &str| Error::parse(path, m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fail(&format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| fail("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| fail(&e.to_string()))?;
        let net = LacNet::new(header.model_config.clone())?;
        if net.num_params() != header.parameter_count || net.layout().entries() != header.tensors.as_slice() {
            return Err(fail("tensor table does not match the model configuration"));
        }
        let n = header.parameter_count;
        let data = &bytes[20 + len..];
        if data.len() != 12 * n {
            return Err(fail("parameter section has the wrong length"));
        }
        let read = |k: usize| -> Vec<f32> {
            data[4 * n * k..4 * n * (k + 1)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        Ok(Checkpoint {
            model_config: header.model_config,
            train_config: header.train_config,
            step: header.step,
            best_miou_occ: header.best_miou_occ,
            params: read(0),
            adam: AdamState {
                step: header.adam_step,
                m: read(1),
                v: read(2),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Output locations and evaluation data of a training run.
pub struct TrainOptions<'a> {
    pub out_dir: Option<&'a Path>,
    pub eval_scenes: &'a [RgbdScene],
    pub exec: Execution,
    /// Continue from this state instead of initializing.
    pub resume: Option<Checkpoint>,
    /// Stop after this many iterations of the current run, leaving the
    /// checkpoint resumable; `None` runs to `total_iterations`.
    pub stop_after: Option<u64>,
    pub progress: Option<&'a mut dyn FnMut(&HistoryRow)>,
}

impl<'a> TrainOptions<'a> {
    pub fn new(eval_scenes: &'a [RgbdScene]) -> Self {
        TrainOptions {
            out_dir: None,
            eval_scenes,
            exec: Execution::default(),
            resume: None,
            stop_after: None,
            progress: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub best: Option<Checkpoint>,
    pub history: Vec<HistoryRow>,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

/// Evaluation mIoU on ground-truth visible priors.
pub fn eval_miou(model: &Model, scenes: &[RgbdScene], exec: Execution) -> Result<(Option<f64>, Option<f64>)> {
    let priors = visible_priors(scenes, &VisibleSource::GroundTruth);
    let report = evaluate(scenes, &priors, Predictor::Model(model), exec)?.report;
    Ok((report.miou_full, report.miou_occ))
}

/// Opens the history file for a run that has completed `step` iterations,
/// dropping rows past `step` left by an interrupted run.
fn open_history(dir: &Path, step: u64) -> Result<(PathBuf, fs::File)> {
    let path = dir.join(HISTORY_FILE);
    let mut text = format!("{}\n", history_header());
    if step > 0 && path.exists() {
        let old = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in old.lines().skip(1) {
            let it = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
            if it.is_some_and(|it| it <= step) {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    Ok((path, file))
}

/// Runs (or continues) training. The history holds one row per iteration of
/// this run; evaluation columns are filled every `eval_every` iterations and
/// at the last one.
pub fn train(
    train_scenes: &[RgbdScene],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let index = instance_index(train_scenes);
    if index.is_empty() {
        return Err(Error::InvalidConfig("training set has no instances".into()));
    }
    if opts.eval_scenes.is_empty() {
        return Err(Error::InvalidConfig("at least one evaluation scene is required".into()));
    }
    let (net, mut ckpt) = match opts.resume.take() {
        Some(c) => {
            if &c.model_config != model_config {
                return Err(Error::InvalidConfig("resume checkpoint has a different model configuration".into()));
            }
            (LacNet::new(c.model_config.clone())?, c)
        }
        None => {
            let net = LacNet::new(model_config.clone())?;
            let params = net.init_params::<f32>();
            let adam = AdamState::new(params.len());
            let ckpt = Checkpoint {
                model_config: model_config.clone(),
                train_config: cfg.clone(),
                step: 0,
                best_miou_occ: None,
                params,
                adam,
            };
            (net, ckpt)
        }
    };
    ckpt.train_config = cfg.clone();
    let spec = CropSpec {
        expansion_factor: 2.0,
        output_size: model_config.input_size,
    };
    spec.validate()?;

    let mut history_file = match opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(open_history(dir, ckpt.step)?)
        }
        None => None,
    };
    let end = match opts.stop_after {
        Some(n) => (ckpt.step + n).min(cfg.total_iterations),
        None => cfg.total_iterations,
    };
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    while ckpt.step < end {
        let iteration = ckpt.step + 1;
        let samples = opts.exec.try_map_range(cfg.batch_size, |slot| {
            make_sample(train_scenes, &index, cfg, &spec, iteration, slot)
        })?;
        let (loss_value, grads) = batch_gradient(&net, &ckpt.params, &samples, cfg.micro_batch, opts.exec)?;
        if !loss_value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration });
        }
        adamw_step(&mut ckpt.params, &grads, &mut ckpt.adam, cfg);
        ckpt.step = iteration;

        let mut row = HistoryRow {
            iteration,
            loss: loss_value,
            miou_full: None,
            miou_occ: None,
        };
        let evaluated = iteration % cfg.eval_every == 0 || iteration == cfg.total_iterations;
        let mut improved = false;
        if evaluated {
            let model = Model::from_params(model_config.clone(), ckpt.params.clone())?;
            let (full, occ) = eval_miou(&model, opts.eval_scenes, opts.exec)?;
            row.miou_full = full;
            row.miou_occ = occ;
            if let Some(score) = occ.or(full) {
                if ckpt.best_miou_occ.is_none_or(|b| score > b) {
                    ckpt.best_miou_occ = Some(score);
                    improved = true;
                }
            }
        }
        if let Some((path, file)) = history_file.as_mut() {
            writeln!(file, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
        }
        if improved {
            best = Some(ckpt.clone());
        }
        if let Some(dir) = opts.out_dir.filter(|_| evaluated) {
            if improved {
                ckpt.save(&dir.join(BEST_CHECKPOINT))?;
            }
            ckpt.save(&dir.join(LAST_CHECKPOINT))?;
        }
        if let Some(cb) = opts.progress.as_mut() {
            cb(&row);
        }
        history.push(row);
    }
    if let Some(dir) = opts.out_dir {
        ckpt.save(&dir.join(LAST_CHECKPOINT))?;
        if ckpt.step == cfg.total_iterations {
            ckpt.save(&dir.join(FINAL_CHECKPOINT))?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        best,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = vec![1.0f64];
        let mut s = AdamState::new(1);
        adamw_step(&mut p, &[1.0], &mut s, &cfg(0.1, 0.0));
        assert!((p[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_zero_gradient() {
        let mut p = vec![1.0f64];
        let mut s = AdamState::new(1);
        adamw_step(&mut p, &[0.0], &mut s, &cfg(0.1, 0.0));
        assert_eq!(p[0], 1.0);
        let mut p = vec![1.0f64];
        let mut s = AdamState::new(1);
        adamw_step(&mut p, &[0.0], &mut s, &cfg(0.1, 0.1));
        assert!((p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adamw_matches_recurrences() {
        let c = cfg(0.01, 0.05);
        let mut p = vec![0.5f64, -2.0];
        let mut s = AdamState::new(2);
        let grads = [[0.3, -1.0], [0.1, 0.2], [-0.4, 0.0]];
        let (mut m, mut v, mut q) = ([0.0; 2], [0.0; 2], [0.5, -2.0]);
        for (t, g) in grads.iter().enumerate() {
            adamw_step(&mut p, g, &mut s, &c);
            for i in 0..2 {
                q[i] -= 0.01 * 0.05 * q[i];
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vh = v[i] / (1.0 - 0.999f64.powi(t as i32 + 1));
                q[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
                assert!((p[i] - q[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            eval_every: 10,
            total_iterations: 5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn history_csv_blank_when_not_evaluated() {
        let r = HistoryRow {
            iteration: 3,
            loss: 0.5,
            miou_full: None,
            miou_occ: None,
        };
        assert_eq!(r.csv(), "3,0.500000,,");
    }
}
