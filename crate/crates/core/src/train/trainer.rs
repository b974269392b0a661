use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use crate::data::{batches, load_any, DataKind, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{Likelihood, Model};
use crate::rng::{derive_seed, stream_rng, SALT_EVAL, SALT_INIT, SALT_NOISE, SALT_VALID};
use crate::tensor_ad::Tape;
use crate::vae::{elbo_graph, sample_noise, warmup_beta};

pub const METRICS_HEADER: &str = "epoch,beta,train_elbo,val_elbo,recon_ll,kl_mc";
/// Rows evaluated per forward pass when scoring a whole split.
const EVAL_CHUNK: usize = 500;

/// One row of `metrics.csv`. The training columns are example-weighted
/// means over the epoch; `train_elbo` is the unannealed bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub beta: f64,
    pub train_elbo: f64,
    pub val_elbo: f64,
    pub recon_ll: f64,
    pub kl_mc: f64,
}

impl EpochMetrics {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}\n",
            self.epoch, self.beta, self.train_elbo, self.val_elbo, self.recon_ll, self.kl_mc
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub learning_rate: f64,
    pub best_epoch: usize,
    pub best_val_elbo: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

fn check_kind(likelihood: Likelihood, ds: &Dataset) -> Result<()> {
    if likelihood == Likelihood::Bernoulli && ds.kind() != DataKind::Binary {
        return Err(Error::Data(
            "bernoulli likelihood needs binary data; use likelihood = gaussian".into(),
        ));
    }
    Ok(())
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("'{key}' is required")))
}

/// Loads the training and validation splits named by `config`.
pub fn load_splits(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let mut train = load_any(required(&config.train_path, "train_path")?)?.with_split(Split::Train);
    let valid = load_any(required(&config.valid_path, "valid_path")?)?.with_split(Split::Valid);
    if config.train_limit > 0 && config.train_limit < train.len() {
        train = train.head(config.train_limit)?;
    }
    Ok((train, valid))
}

/// Trains from the files named in `config`. With a non-empty `lr_grid`
/// every rate is tried and the best run is reported.
pub fn train(config: &TrainConfig) -> Result<RunReport> {
    config.validate()?;
    let (train, valid) = load_splits(config)?;
    if config.lr_grid.is_empty() {
        train_on(config, &train, &valid)
    } else {
        sweep_learning_rates(config, &train, &valid, &config.lr_grid).map(|(best, _)| best)
    }
}

/// Mean β = 1 bound over `ds` with one noise draw per example.
fn split_elbo(model: &Model, ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut total = 0.0;
    let n = ds.len();
    let indices: Vec<usize> = (0..n).collect();
    for (i, chunk) in indices.chunks(EVAL_CHUNK).enumerate() {
        let x = ds.batch(chunk)?;
        let eps = sample_noise(rng, chunk.len(), model.spec().latent);
        let mut tape = Tape::new();
        let params = model.bind_frozen(&mut tape);
        let graph = elbo_graph(&mut tape, model, &params, &x, &eps, 1.0)
            .map_err(|e| e.at_batch(i, "evaluation"))?;
        total += graph.bound_per_example(&tape).iter().sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Single training run at `config.learning_rate`, writing `metrics.csv`,
/// `timing.csv`, `config.txt` and `best.ckpt` into `config.output_dir`.
pub fn train_on(config: &TrainConfig, train: &Dataset, valid: &Dataset) -> Result<RunReport> {
    config.validate()?;
    if train.dim() != valid.dim() {
        return Err(Error::Data(format!(
            "train has {} features but valid has {}",
            train.dim(),
            valid.dim()
        )));
    }
    let spec = config.model_spec(train.dim())?;
    check_kind(spec.likelihood, train)?;
    check_kind(spec.likelihood, valid)?;

    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), config.to_text())?;
    let ckpt_path = out.join("best.ckpt");

    let mut model = Model::new(spec, derive_seed(config.seed, SALT_INIT))?;
    let mut adam = AdamState::new(model.params().tensors());
    let mut noise = stream_rng(config.seed, SALT_NOISE, 0);

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut timing = String::from("epoch,wall_seconds\n");
    let mut history = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let start = Instant::now();

    for epoch in 1..=config.max_epochs {
        let beta = warmup_beta(epoch, config.warmup_epochs);
        let plan = batches(train.len(), config.batch_size, config.seed, epoch as u64)?;
        let (mut bound, mut recon, mut kl) = (0.0, 0.0, 0.0);

        for (b, idx) in plan.iter().enumerate() {
            let context = format!("epoch {epoch}");
            let x = train.batch(idx)?;
            let eps = sample_noise(&mut noise, idx.len(), model.spec().latent);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let graph = elbo_graph(&mut tape, &model, &vars, &x, &eps, beta)
                .map_err(|e| e.at_batch(b, &context))?;
            tape.backward(graph.loss)?;

            let w = idx.len() as f64;
            let parts = graph.breakdown(&tape);
            bound += parts.bound() * w;
            recon += parts.recon_ll * w;
            kl += parts.kl_mc * w;

            let grads: Vec<Vec<f64>> = vars
                .iter()
                .zip(model.params().tensors())
                .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
                .collect();
            let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            adam_step(model.params_mut().tensors_mut(), &grads, &mut adam, config.learning_rate)
                .map_err(|e| e.at_batch(b, &context))?;
        }

        let n = train.len() as f64;
        // the same validation noise every epoch, so epochs are compared on
        // common random numbers
        let val_elbo = split_elbo(&model, valid, &mut stream_rng(config.seed, SALT_VALID, 0))?;
        let row = EpochMetrics {
            epoch,
            beta,
            train_elbo: bound / n,
            val_elbo,
            recon_ll: recon / n,
            kl_mc: kl / n,
        };
        metrics.push_str(&row.csv_row());
        let _ = writeln!(timing, "{epoch},{:.3}", start.elapsed().as_secs_f64());
        fs::write(out.join("metrics.csv"), &metrics)?;
        fs::write(out.join("timing.csv"), &timing)?;
        history.push(row);

        if best.is_none_or(|(_, v)| val_elbo > v) {
            best = Some((epoch, val_elbo));
            Checkpoint {
                config: config.clone(),
                data_dim: train.dim(),
                params: model.params().clone(),
                adam: adam.clone(),
                epoch: epoch as u64,
                best_val_elbo: val_elbo,
                rng: noise.clone(),
            }
            .save(&ckpt_path)?;
        }
        let (best_epoch, _) = best.expect("set on the first epoch");
        if epoch - best_epoch >= config.patience {
            break;
        }
    }

    let (best_epoch, best_val_elbo) = best.expect("max_epochs >= 1");
    Ok(RunReport {
        learning_rate: config.learning_rate,
        best_epoch,
        best_val_elbo,
        epochs_run: history.len(),
        history,
        checkpoint: ckpt_path,
    })
}

/// Trains once per learning rate in `grid`, each in its own `lr-<rate>`
/// subdirectory, and copies the best checkpoint to `output_dir/best.ckpt`.
/// Returns the best run and all runs in grid order.
pub fn sweep_learning_rates(
    config: &TrainConfig,
    train: &Dataset,
    valid: &Dataset,
    grid: &[f64],
) -> Result<(RunReport, Vec<RunReport>)> {
    if grid.is_empty() {
        return Err(Error::Config("empty learning-rate grid".into()));
    }
    fs::create_dir_all(&config.output_dir)?;
    let mut runs = Vec::with_capacity(grid.len());
    for &lr in grid {
        let mut cfg = config.clone();
        cfg.learning_rate = lr;
        cfg.lr_grid.clear();
        cfg.output_dir = config.output_dir.join(format!("lr-{lr}"));
        runs.push(train_on(&cfg, train, valid)?);
    }
    let best = runs
        .iter()
        .fold(&runs[0], |acc, r| if r.best_val_elbo > acc.best_val_elbo { r } else { acc })
        .clone();

    let mut summary = String::from("learning_rate,best_epoch,best_val_elbo,epochs_run\n");
    for r in &runs {
        let _ = writeln!(summary, "{},{},{},{}", r.learning_rate, r.best_epoch, r.best_val_elbo, r.epochs_run);
    }
    fs::write(config.output_dir.join("sweep.csv"), summary)?;
    fs::copy(&best.checkpoint, config.output_dir.join("best.ckpt"))?;
    Ok((best, runs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean bound over examples, one entry per pass.
    pub per_pass: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across passes (0 for a single pass).
    pub std: f64,
}

/// Test-set bound (β = 1) of a trained model, averaged over `passes`
/// independent noise draws.
pub fn evaluate_model(model: &Model, ds: &Dataset, passes: usize, seed: u64) -> Result<EvalReport> {
    if passes == 0 {
        return Err(Error::Config("passes must be at least 1".into()));
    }
    if ds.dim() != model.spec().data_dim {
        return Err(Error::Data(format!(
            "model expects {} features, data has {}",
            model.spec().data_dim,
            ds.dim()
        )));
    }
    check_kind(model.spec().likelihood, ds)?;
    let per_pass = (0..passes)
        .map(|p| split_elbo(model, ds, &mut stream_rng(seed, SALT_EVAL, p as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_pass.iter().sum::<f64>() / passes as f64;
    let std = if passes > 1 {
        let ss: f64 = per_pass.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (passes - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport { per_pass, mean, std })
}

pub fn evaluate(checkpoint: &Checkpoint, ds: &Dataset, passes: usize, seed: u64) -> Result<EvalReport> {
    if ds.dim() != checkpoint.data_dim {
        return Err(Error::Data(format!(
            "checkpoint expects {} features, data has {}",
            checkpoint.data_dim,
            ds.dim()
        )));
    }
    evaluate_model(&checkpoint.model()?, ds, passes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::tensor_ad::Tensor;
    use rand::{Rng, SeedableRng};

    fn binary(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n * d).map(|_| f64::from(rng.gen_bool(0.3) as u8)).collect();
        Dataset::new(Tensor::new(&[n, d], v).unwrap(), DataKind::Binary).unwrap()
    }

    fn tiny(dir: &Path, extra: &str) -> TrainConfig {
        let mut c = TrainConfig::parse(&format!(
            "flow = none\nlatent = 2\nhidden = 8\nbatch_size = 4\nmax_epochs = 5\nwarmup_epochs = 2\nlearning_rate = 1e-2\n{extra}"
        ))
        .unwrap();
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn overfits_a_small_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let data = binary(16, 64, 1);
        let cfg = tiny(dir.path(), "max_epochs = 200\npatience = 200\nwarmup_epochs = 0\nhidden = 32\n");
        let report = train_on(&cfg, &data, &data).unwrap();
        let first = report.history[0].train_elbo;
        let best = report.history.iter().map(|m| m.train_elbo).fold(f64::MIN, f64::max);
        assert!(best - first >= 10.0, "first {first}, best {best}");
    }

    #[test]
    fn metrics_have_header_and_warmup_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let data = binary(10, 6, 2);
        let cfg = tiny(dir.path(), "max_epochs = 3\npatience = 10\nwarmup_epochs = 2\n");
        train_on(&cfg, &data, &data).unwrap();
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 4);
        let betas: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(betas, ["0.5", "1", "1"]);
        assert!(dir.path().join("best.ckpt").exists());
        assert!(dir.path().join("timing.csv").exists());
    }

    #[test]
    fn patience_one_with_flat_validation_stops_at_epoch_two() {
        let dir = tempfile::tempdir().unwrap();
        let data = binary(8, 4, 3);
        // an update of 1e-300 leaves every weight unchanged, so the
        // validation score is constant
        let mut cfg = tiny(dir.path(), "patience = 1\nmax_epochs = 50\n");
        cfg.learning_rate = 1e-300;
        let report = train_on(&cfg, &data, &data).unwrap();
        assert_eq!(report.epochs_run, 2);
        assert_eq!(report.best_epoch, 1);
        assert_eq!(report.history[0].val_elbo, report.history[1].val_elbo);
    }

    #[test]
    fn checkpoint_holds_best_validation_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let data = binary(12, 6, 4);
        let cfg = tiny(dir.path(), "max_epochs = 8\npatience = 3\n");
        let report = train_on(&cfg, &data, &data).unwrap();
        let ck = Checkpoint::load(&report.checkpoint).unwrap();
        assert_eq!(ck.epoch as usize, report.best_epoch);
        assert_eq!(ck.best_val_elbo, report.best_val_elbo);
        for m in &report.history {
            assert!(m.val_elbo <= ck.best_val_elbo);
        }
    }

    #[test]
    fn evaluation_is_seeded_and_checks_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let data = binary(12, 6, 5);
        let cfg = tiny(dir.path(), "max_epochs = 2\n");
        let report = train_on(&cfg, &data, &data).unwrap();
        let ck = Checkpoint::load(&report.checkpoint).unwrap();
        let a = evaluate(&ck, &data, 3, 11).unwrap();
        let b = evaluate(&ck, &data, 3, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.std > 0.0);
        assert!(matches!(evaluate(&ck, &binary(4, 5, 0), 1, 0), Err(Error::Data(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gray = synthetic_blobs(4, 3, &mut rng).unwrap();
        assert!(gray.dim() != 6 || matches!(evaluate(&ck, &gray, 1, 0), Err(Error::Data(_))));
    }

    #[test]
    fn bernoulli_rejects_continuous_data() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gray = synthetic_blobs(8, 3, &mut rng).unwrap();
        let cfg = tiny(dir.path(), "");
        assert!(matches!(train_on(&cfg, &gray, &gray), Err(Error::Data(_))));
        let cfg = tiny(dir.path(), "likelihood = gaussian\nmax_epochs = 2\n");
        train_on(&cfg, &gray, &gray).unwrap();
    }

    #[test]
    fn sweep_picks_best_validation_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = binary(12, 6, 6);
        let cfg = tiny(dir.path(), "max_epochs = 3\n");
        let (best, runs) = sweep_learning_rates(&cfg, &data, &data, &[1e-4, 1e-2]).unwrap();
        assert_eq!(runs.len(), 2);
        assert!(runs.iter().all(|r| r.best_val_elbo <= best.best_val_elbo));
        assert!(dir.path().join("sweep.csv").exists());
        assert!(dir.path().join("lr-0.0001").join("metrics.csv").exists());
        assert_eq!(
            fs::read(dir.path().join("best.ckpt")).unwrap(),
            fs::read(&best.checkpoint).unwrap()
        );
    }
}
