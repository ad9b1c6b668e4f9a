//! Unsupervised training: patch sampling, learning-rate schedule, the
//! per-step update and the outer loop with checkpointing.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::imageio::{self, ImagePair};
use crate::model::{MfNetConfig, MfNetWeights};
use crate::optim::{Optimizer, OptimizerKind};
use crate::raster::Image;
use crate::ssim::{self, SsimConstants};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    /// Where checkpoints and the loss log go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    pub patch_size: usize,
    /// Size of the pool of random crops that batches are drawn from.
    pub num_patches: usize,
    pub iters_per_epoch: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub model: MfNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: PathBuf::new(),
            out_dir: None,
            patch_size: 64,
            num_patches: 50_000,
            iters_per_epoch: 400,
            epochs: 30,
            batch_size: 16,
            lr0: 1e-3,
            lr_decay_rate: 0.96,
            lr_decay_steps: 1000,
            weight_decay: 1e-4,
            seed: 1,
            optimizer: OptimizerKind::Adam,
            checkpoint_every: 1000,
            model: MfNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.epochs * self.iters_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let k = SsimConstants::default();
        if self.patch_size < k.window {
            return Err(Error::Config(format!(
                "patch_size {} is smaller than the {}x{} window",
                self.patch_size, k.window, k.window
            )));
        }
        if self.num_patches == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "num_patches and batch_size must be positive".into(),
            ));
        }
        if self.iters_per_epoch == 0 || self.lr_decay_steps == 0 {
            return Err(Error::Config(
                "iters_per_epoch and lr_decay_steps must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lr0) || !(0.0..=1.0).contains(&self.weight_decay) {
            return Err(Error::Config(
                "lr0 and weight_decay must lie in [0, 1]".into(),
            ));
        }
        if !(self.lr_decay_rate > 0.0 && self.lr_decay_rate <= 1.0) {
            return Err(Error::Config("lr_decay_rate must lie in (0, 1]".into()));
        }
        if self.data_dir.as_os_str().is_empty() {
            return Err(Error::Config("data_dir is required".into()));
        }
        Ok(())
    }

    /// `key=value` lines understood by [`TrainConfig::parse`].
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let mut kv = vec![
            ("data_dir", self.data_dir.display().to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("num_patches", self.num_patches.to_string()),
            ("iters_per_epoch", self.iters_per_epoch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr0", format!("{:?}", self.lr0)),
            ("lr_decay_rate", format!("{:?}", self.lr_decay_rate)),
            ("lr_decay_steps", self.lr_decay_steps.to_string()),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("seed", self.seed.to_string()),
            ("optimizer", self.optimizer.name().to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("channels", self.model.channels.to_string()),
            ("d1", self.model.d1.to_string()),
            ("d2", self.model.d2.to_string()),
            ("d3", self.model.d3.to_string()),
            ("lrelu_slope", format!("{:?}", self.model.lrelu_slope)),
            ("model_seed", self.model.seed.to_string()),
        ];
        if let Some(out) = &self.out_dir {
            kv.insert(1, ("out_dir", out.display().to_string()));
        }
        kv
    }

    /// Parses flat `key=value` text. Blank lines and `#` comments are ignored;
    /// unknown keys are errors. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigParse {
                line,
                message: format!("expected key=value, got {content:?}"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|message| Error::ConfigParse { line, message })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("invalid value {value:?} for {key}"))
        }
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "patch_size" => self.patch_size = num(key, value)?,
            "num_patches" => self.num_patches = num(key, value)?,
            "iters_per_epoch" => self.iters_per_epoch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr0" => self.lr0 = num(key, value)?,
            "lr_decay_rate" => self.lr_decay_rate = num(key, value)?,
            "lr_decay_steps" => self.lr_decay_steps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "optimizer" => {
                self.optimizer = OptimizerKind::parse(value)
                    .ok_or_else(|| format!("unknown optimizer {value:?}"))?
            }
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "channels" => self.model.channels = num(key, value)?,
            "d1" => self.model.d1 = num(key, value)?,
            "d2" => self.model.d2 = num(key, value)?,
            "d3" => self.model.d3 = num(key, value)?,
            "lrelu_slope" => self.model.lrelu_slope = num(key, value)?,
            "model_seed" => self.model.seed = num(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }
}

/// Learning rate after `step` updates: `lr0 * rate^(step / decay_steps)`
/// with a real-valued exponent.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0
        * cfg
            .lr_decay_rate
            .powf(step as f64 / cfg.lr_decay_steps as f64)
}

/// Two crops taken at the same location of a registered pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub p1: Image,
    pub p2: Image,
}

/// Location of one crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub pair: usize,
    pub x: usize,
    pub y: usize,
}

impl CropSpec {
    pub fn extract(&self, pairs: &[ImagePair], size: usize) -> PatchPair {
        let p = &pairs[self.pair];
        PatchPair {
            p1: p.first.crop(self.x, self.y, size, size),
            p2: p.second.crop(self.x, self.y, size, size),
        }
    }
}

/// Deterministic stream of uniformly random crops.
///
/// Pairs smaller than the crop size in either dimension are skipped.
#[derive(Debug)]
pub struct CropSampler {
    eligible: Vec<usize>,
    dims: Vec<(usize, usize)>,
    size: usize,
    remaining: usize,
    excluded: usize,
    rng: ChaCha8Rng,
}

impl CropSampler {
    pub fn new(pairs: &[ImagePair], n: usize, size: usize, seed: u64) -> Self {
        let dims: Vec<_> = pairs.iter().map(ImagePair::dims).collect();
        let eligible: Vec<usize> = dims
            .iter()
            .enumerate()
            .filter(|(_, &(w, h))| w >= size && h >= size)
            .map(|(i, _)| i)
            .collect();
        let excluded = pairs.len() - eligible.len();
        if excluded > 0 {
            warn!("{excluded} pair(s) smaller than {size}x{size} excluded from sampling");
        }
        let remaining = if eligible.is_empty() { 0 } else { n };
        CropSampler {
            eligible,
            dims,
            size,
            remaining,
            excluded,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Number of pairs skipped for being too small.
    pub fn excluded(&self) -> usize {
        self.excluded
    }
}

impl Iterator for CropSampler {
    type Item = CropSpec;

    fn next(&mut self) -> Option<CropSpec> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let pair = self.eligible[self.rng.random_range(0..self.eligible.len())];
        let (w, h) = self.dims[pair];
        let x = self.rng.random_range(0..=w - self.size);
        let y = self.rng.random_range(0..=h - self.size);
        Some(CropSpec { pair, x, y })
    }
}

/// Exactly `n` patch pairs with uniformly random pair index and origin,
/// reproducible from `seed`.
pub struct PatchSampler<'a> {
    pairs: &'a [ImagePair],
    crops: CropSampler,
}

impl PatchSampler<'_> {
    pub fn excluded(&self) -> usize {
        self.crops.excluded()
    }
}

impl Iterator for PatchSampler<'_> {
    type Item = PatchPair;

    fn next(&mut self) -> Option<PatchPair> {
        let size = self.crops.size;
        self.crops.next().map(|c| c.extract(self.pairs, size))
    }
}

pub fn sample_patches(pairs: &[ImagePair], n: usize, size: usize, seed: u64) -> PatchSampler<'_> {
    PatchSampler {
        pairs,
        crops: CropSampler::new(pairs, n, size, seed),
    }
}

/// One optimisation step on a batch. Returns the loss before the update.
pub fn train_step(
    weights: &mut MfNetWeights,
    optimizer: &mut Optimizer,
    batch: &[PatchPair],
    step: u64,
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    let k = SsimConstants::default();
    let p1: Vec<&Image> = batch.iter().map(|p| &p.p1).collect();
    let p2: Vec<&Image> = batch.iter().map(|p| &p.p2).collect();
    let x1 = Image::stack::<f32>(&p1)?;
    let x2 = Image::stack::<f32>(&p2)?;

    let mut graph = Graph::new();
    let a = graph.constant(x1.clone())?;
    let b = graph.constant(x2.clone())?;
    let (out, vars) = weights.forward(&mut graph, a, b)?;
    let loss_var = ssim::fusion_loss(&mut graph, &x1, &x2, out, &k)?;
    let loss = graph.value(loss_var).item() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            statistic: format!("loss = {loss}"),
        });
    }
    graph.backward(loss_var)?;
    weights.accumulate_grads(&graph, &vars);
    for (name, p) in weights.params() {
        if let Some(g) = p.grad() {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                let statistic = format!("gradient of {name} contains {bad}");
                weights.zero_grad();
                return Err(Error::NonFiniteLoss { step, statistic });
            }
        }
    }
    optimizer.step(weights.params_mut(), lr_at(step, cfg), cfg.weight_decay);
    weights.zero_grad();
    Ok(loss)
}

/// Progress of one completed step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

const BATCH_STREAM_SALT: u64 = 0x6d66_7573_655f_6261;

/// Crop indices of the batch used at `step`. Depends only on the seed and
/// the step, so resumed runs see the same batches.
pub fn batch_indices(cfg: &TrainConfig, step: u64, pool_len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM_SALT);
    rng.set_stream(step);
    (0..cfg.batch_size)
        .map(|_| rng.random_range(0..pool_len))
        .collect()
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:08}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOSS_LOG: &str = "loss.log";

/// Runs `epochs * iters_per_epoch` steps from scratch.
pub fn train(cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with(cfg, None, |_| {})
}

/// Runs training, optionally resuming from `resume`, calling `on_step`
/// after every step.
///
/// Steps already present in `resume` are not repeated. Checkpoints and the
/// loss log are written under `cfg.out_dir` when it is set.
pub fn train_with(
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let pairs = imageio::load_dataset(&cfg.data_dir)?;
    let pool: Vec<CropSpec> =
        CropSampler::new(&pairs, cfg.num_patches, cfg.patch_size, cfg.seed).collect();
    if pool.is_empty() {
        return Err(Error::Dataset(format!(
            "no pair is at least {0}x{0}",
            cfg.patch_size
        )));
    }

    let mut ckpt = match resume {
        Some(c) => {
            if c.weights.config() != &cfg.model {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different model configuration".into(),
                ));
            }
            if c.optimizer.kind() != cfg.optimizer {
                return Err(Error::Config(
                    "resume checkpoint uses a different optimizer".into(),
                ));
            }
            Checkpoint {
                config: cfg.clone(),
                ..c
            }
        }
        None => Checkpoint {
            weights: MfNetWeights::init(&cfg.model)?,
            config: cfg.clone(),
            step: 0,
            loss_history: Vec::new(),
            optimizer: Optimizer::new(cfg.optimizer),
        },
    };

    let mut log = match &cfg.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(LOSS_LOG);
            if ckpt.step == 0 {
                // a fresh run replaces any previous log
                fs::write(&path, "")?;
            }
            Some(OpenOptions::new().create(true).append(true).open(path)?)
        }
        None => None,
    };

    let total = cfg.total_steps();
    info!(
        "training {} pairs, steps {}..{}, batch {}",
        pairs.len(),
        ckpt.step,
        total,
        cfg.batch_size
    );
    while ckpt.step < total {
        let step = ckpt.step;
        let batch: Vec<PatchPair> = batch_indices(cfg, step, pool.len())
            .into_iter()
            .map(|i| pool[i].extract(&pairs, cfg.patch_size))
            .collect();
        let lr = lr_at(step, cfg);
        let loss = train_step(&mut ckpt.weights, &mut ckpt.optimizer, &batch, step, cfg)?;
        ckpt.step += 1;
        ckpt.loss_history.push((step, loss));
        let record = StepRecord { step, lr, loss };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{step}\t{lr}\t{loss}")?;
        }
        on_step(&record);
        if let Some(dir) = &cfg.out_dir {
            if cfg.checkpoint_every > 0 && ckpt.step % cfg.checkpoint_every == 0 {
                ckpt.save(&checkpoint_path(dir, ckpt.step))?;
            }
        }
    }
    if let Some(dir) = &cfg.out_dir {
        ckpt.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(ckpt)
}
