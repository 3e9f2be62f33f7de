//! Toy training loop, validation, checkpoints, prediction and the
//! ablation harness.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{read_pgm, write_csv, write_pgm};
use crate::loss::total_loss;
use crate::metrics::{evaluate, MaskPair, Metrics};
use crate::model::{ModelConfig, PredictionPyramid, Variant, Vcamba, STAGES};
use crate::nn::{clear_grads, named_parameters, set_parameter, Module, Params};
use crate::synth::{load_dataset, make_dataset, parse_kv, Dataset, DatasetSpec, VideoClip};
use crate::tensor::{no_grad, vct, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Seed for the synthetic dataset; defaults to `seed`.
    pub data_seed: u64,
    pub clips: usize,
    pub camouflage: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub model: ModelConfig,
    pub variant: Variant,
    /// Load clips from here instead of generating them.
    pub data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            clips: 40,
            camouflage: 0.9,
            steps: 500,
            batch: 2,
            lr: 1e-3,
            eval_every: 50,
            model: ModelConfig::default(),
            variant: Variant::Full,
            data: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

impl TrainConfig {
    /// Parses `key=value` lines over the defaults. `data_seed` follows
    /// `seed` unless given.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut data_seed = None;
        for (k, v) in parse_kv(text)? {
            match k.as_str() {
                "seed" => c.seed = parse(&k, &v)?,
                "data_seed" => data_seed = Some(parse(&k, &v)?),
                "clips" => c.clips = parse(&k, &v)?,
                "camouflage" | "lambda" => c.camouflage = parse(&k, &v)?,
                "steps" => c.steps = parse(&k, &v)?,
                "batch" => c.batch = parse(&k, &v)?,
                "lr" => c.lr = parse(&k, &v)?,
                "eval_every" => c.eval_every = parse(&k, &v)?,
                "frames" => c.model.frames = parse(&k, &v)?,
                "height" => c.model.height = parse(&k, &v)?,
                "width" => c.model.width = parse(&k, &v)?,
                "state" => c.model.state = parse(&k, &v)?,
                "channels" => {
                    let parts: Vec<usize> = v.split(',').map(|p| parse(&k, p.trim())).collect::<Result<_>>()?;
                    c.model.channels = parts
                        .try_into()
                        .map_err(|_| Error::Config(format!("`channels` needs {STAGES} comma-separated sizes")))?;
                }
                "variant" => c.variant = v.parse()?,
                "data" => c.data = Some(PathBuf::from(v)),
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        c.data_seed = data_seed.unwrap_or(c.seed);
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let ch = self.model.channels.map(|v| v.to_string()).join(",");
        let mut s = format!(
            "seed={}\ndata_seed={}\nclips={}\ncamouflage={}\nsteps={}\nbatch={}\nlr={}\neval_every={}\n\
             frames={}\nheight={}\nwidth={}\nchannels={ch}\nstate={}\nvariant={}\n",
            self.seed,
            self.data_seed,
            self.clips,
            self.camouflage,
            self.steps,
            self.batch,
            self.lr,
            self.eval_every,
            self.model.frames,
            self.model.height,
            self.model.width,
            self.model.state,
            self.variant,
        );
        if let Some(d) = &self.data {
            s.push_str(&format!("data={}\n", d.display()));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.camouflage) {
            return Err(Error::Config(format!("camouflage {} outside [0, 1]", self.camouflage)));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            clips: self.clips,
            height: self.model.height,
            width: self.model.width,
            frames: self.model.frames,
            camouflage: self.camouflage,
            ..DatasetSpec::default()
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let ds = match &self.data {
            Some(dir) => load_dataset(dir)?,
            None => make_dataset(&self.dataset_spec(), self.data_seed)?,
        };
        for c in ds.train.iter().chain(&ds.val) {
            let s = &c.spec;
            if (s.frames, s.height, s.width) != (self.model.frames, self.model.height, self.model.width) {
                return Err(Error::Data(format!(
                    "clip is {}x{}x{}, model expects {}x{}x{}",
                    s.frames, s.height, s.width, self.model.frames, self.model.height, self.model.width
                )));
            }
        }
        Ok(ds)
    }
}

/// Adam without weight decay; state is keyed by parameter visit order.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update from the accumulated gradients; clears them.
    pub fn step(&mut self, model: &mut dyn Module) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        let mut f = |_: &str, p: &mut Tensor| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.numel()]);
                vs.push(vec![0.0; p.numel()]);
            }
            if let Some(g) = p.grad() {
                let (m, v) = (&mut ms[idx], &mut vs[idx]);
                let mut data = p.to_vec();
                for i in 0..data.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
                *p = Tensor::param(data, p.shape()).expect("same shape");
            }
            idx += 1;
        };
        model.visit(&mut Params::new(&mut f));
        clear_grads(model);
    }
}

/// Metrics of the finest prediction level, averaged over every frame.
pub fn validate(model: &Vcamba, clips: &[VideoClip]) -> Result<Metrics> {
    let mut all = Vec::new();
    for clip in clips {
        let pyr = no_grad(|| model.forward(&clip.frames))?;
        let (h, w) = (clip.spec.height, clip.spec.width);
        let plane = h * w;
        for t in 0..clip.spec.frames {
            let p = &pyr.finest().data()[t * plane..(t + 1) * plane];
            let g = &clip.masks.data()[t * plane..(t + 1) * plane];
            all.push(evaluate(&MaskPair::new(p, g, h, w)?));
        }
    }
    Metrics::mean(&all).ok_or_else(|| Error::Data("no validation frames".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub val_mdice: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Vcamba,
    pub log: Vec<LogRow>,
    pub val: Metrics,
}

pub fn batch_loss(model: &Vcamba, clips: &[&VideoClip]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for c in clips {
        let l = total_loss(&model.forward(&c.frames)?.levels, &c.masks)?;
        acc = Some(match acc {
            Some(a) => a.add(&l)?,
            None => l,
        });
    }
    Ok(acc.ok_or_else(|| Error::Data("empty batch".into()))?.scale(1.0 / clips.len() as f64))
}

/// Trains from scratch; the log's `loss` is the batch loss before that
/// step's update, `val_mdice` is measured after it.
pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data("training needs nonempty train and val splits".into()));
    }
    let mut model = Vcamba::new(config.model.clone(), config.variant, config.seed)?;
    let mut opt = Adam::new(config.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d0f0_bde5);
    let mut queue: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch {
            if queue.is_empty() {
                queue = (0..data.train.len()).collect();
                queue.shuffle(&mut order_rng);
            }
            batch.push(&data.train[queue.pop().expect("refilled")]);
        }
        // one graph per clip keeps the tape small
        let mut loss = 0.0;
        for clip in &batch {
            let l = batch_loss(&model, &[clip])?.scale(1.0 / batch.len() as f64);
            loss += l.item();
            l.backward()?;
        }
        if !loss.is_finite() {
            return Err(Error::Numerics { op: "train", detail: format!("loss {loss} at step {step}") });
        }
        opt.step(&mut model);
        let val_mdice = if (step + 1) % config.eval_every == 0 || step + 1 == config.steps {
            Some(validate(&model, &data.val)?.mdice)
        } else {
            None
        };
        info!("step {step} loss {loss:.5} val mDice {val_mdice:?}");
        log.push(LogRow { step, loss, val_mdice });
    }
    let val = validate(&model, &data.val)?;
    Ok(TrainOutcome { model, log, val })
}

pub fn write_log(path: impl AsRef<Path>, log: &[LogRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|r| vec![r.step.to_string(), r.loss.to_string(), r.val_mdice.map(|v| v.to_string()).unwrap_or_default()])
        .collect();
    write_csv(path, &["step", "loss", "val_mdice"], &rows)
}

pub fn metrics_row(m: &Metrics) -> Vec<String> {
    m.values().iter().map(|v| format!("{v:.6}")).collect()
}

/// Trains and writes `log.csv`, `metrics.csv` and `checkpoint/` under `out`.
pub fn train(config: &TrainConfig, out: impl AsRef<Path>) -> Result<TrainOutcome> {
    let out = out.as_ref();
    let data = config.dataset()?;
    let mut outcome = train_on(config, &data)?;
    fs::create_dir_all(out)?;
    write_log(out.join("log.csv"), &outcome.log)?;
    write_csv(out.join("metrics.csv"), &Metrics::COLUMNS, &[metrics_row(&outcome.val)])?;
    save_checkpoint(&mut outcome.model, config, out.join("checkpoint"))?;
    Ok(outcome)
}

fn shape_text(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Directory of VCT1 tensors, `manifest.txt` (name, shape, file per line)
/// and `config.txt`.
pub fn save_checkpoint(model: &mut Vcamba, config: &TrainConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, (name, t)) in named_parameters(model).iter().enumerate() {
        let file = format!("p{i:04}.vct");
        vct::write(t, dir.join(&file))?;
        manifest.push_str(&format!("{name} {} {file}\n", shape_text(t.shape())));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    let cfg = TrainConfig { model: model.config.clone(), variant: model.variant, ..config.clone() };
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TrainConfig, Vcamba)> {
    let dir = dir.as_ref();
    let ck = |e: Error| Error::Checkpoint(format!("{}: {e}", dir.display()));
    let config =
        TrainConfig::from_text(&fs::read_to_string(dir.join("config.txt")).map_err(|e| ck(e.into()))?).map_err(ck)?;
    let manifest = fs::read_to_string(dir.join("manifest.txt")).map_err(|e| ck(e.into()))?;
    let mut model = Vcamba::new(config.model.clone(), config.variant, config.seed)?;
    let expected: Vec<String> = named_parameters(&mut model).into_iter().map(|(n, _)| n).collect();
    let mut seen = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, file] = parts[..] else {
            return Err(Error::Checkpoint(format!("malformed manifest line `{line}`")));
        };
        let t = vct::read(dir.join(file)).map_err(ck)?;
        if shape_text(t.shape()) != shape {
            return Err(Error::Checkpoint(format!("{name}: manifest says {shape}, file holds {:?}", t.shape())));
        }
        set_parameter(&mut model, name, &t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        seen.push(name.to_string());
    }
    if let Some(missing) = expected.iter().find(|n| !seen.contains(n)) {
        return Err(Error::Checkpoint(format!("manifest lacks `{missing}`")));
    }
    Ok((config, model))
}

/// Runs a checkpoint on one clip and writes the finest level as
/// `mask_XXX.pgm` under `out`.
pub fn predict(checkpoint: impl AsRef<Path>, clip: &VideoClip, out: impl AsRef<Path>) -> Result<PredictionPyramid> {
    let (_, model) = load_checkpoint(checkpoint)?;
    predict_with(&model, clip, out)
}

pub fn predict_with(model: &Vcamba, clip: &VideoClip, out: impl AsRef<Path>) -> Result<PredictionPyramid> {
    let pyr = no_grad(|| model.forward(&clip.frames))?;
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let (h, w) = (clip.spec.height, clip.spec.width);
    for t in 0..clip.spec.frames {
        write_pgm(out.join(format!("mask_{t:03}.pgm")), &pyr.finest().data()[t * h * w..(t + 1) * h * w], h, w)?;
    }
    Ok(pyr)
}

fn pgm_files(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    Ok(names)
}

/// Per-sequence mean metrics for matching PGM masks. Subdirectories of
/// `pred` are sequences; loose PGMs form a sequence named `.`.
pub fn evaluate_dirs(pred: impl AsRef<Path>, gt: impl AsRef<Path>) -> Result<Vec<(String, Metrics)>> {
    let (pred, gt) = (pred.as_ref(), gt.as_ref());
    let mut seqs: Vec<String> = fs::read_dir(pred)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    seqs.sort();
    if !pgm_files(pred)?.is_empty() {
        seqs.insert(0, ".".into());
    }
    let mut out = Vec::new();
    for seq in seqs {
        let (pd, gd) = (pred.join(&seq), gt.join(&seq));
        let mut frames = Vec::new();
        for name in pgm_files(&pd)? {
            let (p, h, w) = read_pgm(pd.join(&name))?;
            let g_path = gd.join(&name);
            if !g_path.is_file() {
                return Err(Error::Data(format!("no ground truth for {}", pd.join(&name).display())));
            }
            let (g, gh, gw) = read_pgm(&g_path)?;
            if (gh, gw) != (h, w) {
                return Err(Error::shape("evaluate", format!("{name}: {h}x{w} vs {gh}x{gw}")));
            }
            let g: Vec<f64> = g.into_iter().map(|v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
            frames.push(evaluate(&MaskPair::new(&p, &g, h, w)?));
        }
        if let Some(m) = Metrics::mean(&frames) {
            out.push((seq, m));
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no PGM predictions under {}", pred.display())));
    }
    Ok(out)
}

/// Table-style CSV: one row per sequence, then the mean over sequences.
pub fn write_results(path: impl AsRef<Path>, rows: &[(String, Metrics)]) -> Result<()> {
    let mut table: Vec<Vec<String>> =
        rows.iter().map(|(name, m)| std::iter::once(name.clone()).chain(metrics_row(m)).collect()).collect();
    let all: Vec<Metrics> = rows.iter().map(|(_, m)| *m).collect();
    if let Some(mean) = Metrics::mean(&all) {
        table.push(std::iter::once("mean".to_string()).chain(metrics_row(&mean)).collect());
    }
    let mut header = vec!["sequence"];
    header.extend(Metrics::COLUMNS);
    write_csv(path, &header, &table)
}

/// Fixed-width text table with the results CSV's rows and columns.
pub fn format_table(rows: &[(String, Metrics)]) -> String {
    let all: Vec<Metrics> = rows.iter().map(|(_, m)| *m).collect();
    let mut lines: Vec<(String, Metrics)> = rows.to_vec();
    if let Some(mean) = Metrics::mean(&all) {
        lines.push(("mean".into(), mean));
    }
    let width = lines.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("sequence".len());
    let mut out = format!("{:<width$}", "sequence");
    for c in Metrics::COLUMNS {
        out.push_str(&format!("  {c:>8}"));
    }
    out.push('\n');
    for (name, m) in &lines {
        out.push_str(&format!("{name:<width$}"));
        for v in m.values() {
            out.push_str(&format!("  {v:>8.4}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub val: Metrics,
}

/// Trains every variant under every seed with otherwise identical config.
/// Each seed fixes both the dataset and the initialization.
pub fn ablate(base: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig { seed, data_seed: seed, ..base.clone() };
        let data = cfg.dataset()?;
        for &variant in variants {
            let cfg = TrainConfig { variant, ..cfg.clone() };
            let out = train_on(&cfg, &data)?;
            info!("ablation {variant} seed {seed}: mDice {:.4}", out.val.mdice);
            rows.push(AblationRow { variant, seed, val: out.val });
        }
    }
    Ok(rows)
}

pub fn write_ablation(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| [r.variant.to_string(), r.seed.to_string()].into_iter().chain(metrics_row(&r.val)).collect())
        .collect();
    let mut header = vec!["variant", "seed"];
    header.extend(Metrics::COLUMNS);
    write_csv(path, &header, &table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig::from_text(
            "seed=3\nclips=4\nsteps=3\nbatch=2\neval_every=2\nframes=2\nheight=16\nwidth=16\nchannels=2,2,2,2\nstate=2\n",
        )
        .unwrap()
    }

    fn tiny_data(c: &TrainConfig) -> Dataset {
        let spec = DatasetSpec { radius: (3.0, 4.0), speed: (0.5, 1.0), ..c.dataset_spec() };
        make_dataset(&spec, c.data_seed).unwrap()
    }

    #[test]
    fn config_text_roundtrip() {
        let c = tiny();
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(c.data_seed, 3);
        assert!(matches!(TrainConfig::from_text("bogus=1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_text("variant=A9"), Err(Error::UnknownVariant(_))));
        assert!(TrainConfig::from_text("channels=1,2").is_err());
        assert!(TrainConfig::from_text("height=20").is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        struct One(Tensor);
        impl Module for One {
            fn visit(&mut self, p: &mut Params<'_>) {
                p.param("x", &mut self.0);
            }
        }
        let mut m = One(Tensor::param(vec![1.0, -2.0], &[2]).unwrap());
        m.0.square().sum_all().backward().unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut m);
        assert!((m.0.data()[0] - 0.9).abs() < 1e-6);
        assert!((m.0.data()[1] + 1.9).abs() < 1e-6);
        assert!(m.0.grad().is_none());
    }

    #[test]
    fn zero_steps_and_first_loss() {
        let c = TrainConfig { steps: 0, ..tiny() };
        let data = tiny_data(&c);
        let out = train_on(&c, &data).unwrap();
        let mut init = Vcamba::new(c.model.clone(), c.variant, c.seed).unwrap();
        let mut trained = out.model;
        for ((_, a), (_, b)) in named_parameters(&mut init).iter().zip(named_parameters(&mut trained).iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(out.log.is_empty());

        let c = tiny();
        let out = train_on(&c, &data).unwrap();
        assert_eq!(out.log.len(), 3);
        assert!(out.log[0].val_mdice.is_none() && out.log[1].val_mdice.is_some() && out.log[2].val_mdice.is_some());
        // the first two clips drawn, evaluated with the initial weights
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x05ee_d0f0_bde5);
        let mut q: Vec<usize> = (0..data.train.len()).collect();
        q.shuffle(&mut rng);
        let first = [&data.train[q[q.len() - 1]], &data.train[q[q.len() - 2]]];
        let want = no_grad(|| batch_loss(&init, &first)).unwrap().item();
        assert!((out.log[0].loss - want).abs() < 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn training_is_reproducible() {
        let c = tiny();
        let data = tiny_data(&c);
        let a = train_on(&c, &data).unwrap();
        let b = train_on(&c, &data).unwrap();
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn checkpoint_roundtrip_and_predict() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let data = tiny_data(&c);
        let mut out = train_on(&c, &data).unwrap();
        save_checkpoint(&mut out.model, &c, dir.path().join("ck")).unwrap();
        let (cfg, mut back) = load_checkpoint(dir.path().join("ck")).unwrap();
        assert_eq!(cfg, c);
        for ((na, a), (nb, b)) in named_parameters(&mut out.model).iter().zip(named_parameters(&mut back).iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
        let pyr = predict(dir.path().join("ck"), &data.val[0], dir.path().join("pred")).unwrap();
        assert_eq!(pyr.levels.len(), 4);
        assert!(pyr.finest().data().iter().all(|&v| v > 0.0 && v < 1.0));
        let again = predict(dir.path().join("ck"), &data.val[0], dir.path().join("pred2")).unwrap();
        assert_eq!(pyr.finest().data(), again.finest().data());
        assert!(dir.path().join("pred/mask_001.pgm").is_file());

        let manifest = dir.path().join("ck/manifest.txt");
        let text = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, text.lines().skip(1).collect::<Vec<_>>().join("\n")).unwrap();
        assert!(matches!(load_checkpoint(dir.path().join("ck")), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn eval_on_identical_dirs_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let data = tiny_data(&c);
        crate::synth::save_dataset(&data, dir.path()).unwrap();
        let rows = evaluate_dirs(dir.path().join("val"), dir.path().join("val")).unwrap();
        assert_eq!(rows.len(), data.val.len());
        for (_, m) in &rows {
            assert_eq!((m.mae, m.mdice, m.miou), (0.0, 1.0, 1.0));
            assert!((m.s_alpha - 1.0).abs() < 1e-9 && (m.e_phi - 1.0).abs() < 1e-9 && (m.f_beta_w - 1.0).abs() < 1e-9);
        }
        write_results(dir.path().join("r.csv"), &rows).unwrap();
        let (h, table) = crate::io::read_csv(dir.path().join("r.csv")).unwrap();
        assert_eq!(h, ["sequence", "S_alpha", "F_beta_w", "E_phi", "MAE", "mDice", "mIoU"]);
        assert_eq!(table.last().unwrap()[0], "mean");
        let text = format_table(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), rows.len() + 2);
        assert_eq!(
            lines[0].split_whitespace().collect::<Vec<_>>(),
            ["sequence", "S_alpha", "F_beta_w", "E_phi", "MAE", "mDice", "mIoU"]
        );
        assert!(lines[rows.len() + 1].starts_with("mean"));
    }
}
