use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io_formats::{emit_metrics, read_tensor, write_tensor, MetricRecord, RunConfig, Tensor};
use crate::proxy_losses::{end_epoch, pp_selection, proxy_based_total_on, EpochMidState, ProxyLossConfig};
use crate::sphere_stats::{proxy_spread_trackers, sns_tracker};
use crate::uamf::{uamf_loss, EmbeddingBatch, NormTracker, ProxyMatrix};

use super::augment::{augment_with_renders, EXTRA_DIMS};
use super::data::{generate_dataset, permutation, Dataset, SyntheticSpec};

pub fn proxy_config(cfg: &RunConfig) -> ProxyLossConfig {
    ProxyLossConfig {
        lambda_pps: cfg.lambda_pps,
        lambda_pns: cfg.lambda_pns,
        lambda_pp: cfg.lambda_pp,
        lambda_sns: cfg.lambda_sns,
        sns_enabled: cfg.sns_enabled,
        cos_min: cfg.cos_min,
        cos_max: cfg.cos_max,
        mid_strict_mode: cfg.mid_strict_mode,
    }
}

/// Raw input width seen by the embedder.
pub fn model_input_dim(cfg: &RunConfig) -> usize {
    cfg.input_dim + if cfg.recon_augment { EXTRA_DIMS } else { 0 }
}

/// Linear embedder, proxies and everything the optimizer carries between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// `d_in × d`.
    pub embedder: Array2<f64>,
    pub proxies: ProxyMatrix,
    pub tracker: NormTracker,
    pub mid: EpochMidState,
    pub step: usize,
    pub epoch: usize,
    vel_embedder: Array2<f64>,
    vel_proxies: Array2<f64>,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn init(cfg: &RunConfig, input_dim: usize) -> Self {
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let embedder = Array2::from_shape_simple_fn((input_dim, cfg.feature_dim), || {
            let v: f64 = StandardNormal.sample(&mut init_rng);
            scale * v
        });
        let proxies = ProxyMatrix::random(cfg.num_classes, cfg.feature_dim, &mut init_rng);
        let mut tracker = NormTracker::new(cfg.ema_alpha);
        tracker.mu_norm = cfg.mu_norm_init;
        tracker.margin_coef = cfg.margin_coef;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self {
            vel_embedder: Array2::zeros(embedder.raw_dim()),
            vel_proxies: Array2::zeros(proxies.as_array().raw_dim()),
            embedder,
            proxies,
            tracker,
            mid: EpochMidState::new(&proxy_config(cfg)),
            step: 0,
            epoch: 0,
            rng,
        }
    }

    pub fn embed(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.embedder)
    }

    /// Embedder rows followed by proxy rows, `(d_in + C) × d`.
    pub fn to_checkpoint(&self) -> Result<Tensor> {
        let stacked = ndarray::concatenate(Axis(0), &[self.embedder.view(), self.proxies.as_array().view()])
            .map_err(|e| Error::Value(e.to_string()))?;
        let (rows, cols) = stacked.dim();
        Tensor::from_matrix(rows, cols, stacked.as_slice().expect("standard layout"))
    }

    /// Restores embedder and proxies; optimizer state starts fresh.
    pub fn from_checkpoint(t: &Tensor, cfg: &RunConfig) -> Result<Self> {
        let input_dim = model_input_dim(cfg);
        let want = [input_dim + cfg.num_classes, cfg.feature_dim];
        if t.dims != want {
            return Err(Error::Value(format!(
                "checkpoint has shape {:?}, config implies {:?}",
                t.dims, want
            )));
        }
        let all = Array2::from_shape_vec((want[0], want[1]), t.data.iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::Value(e.to_string()))?;
        let mut state = Self::init(cfg, input_dim);
        state.embedder = all.slice(ndarray::s![..input_dim, ..]).to_owned();
        // f32 storage: renormalize to restore exact unit rows
        state.proxies = ProxyMatrix::from_unnormalized(all.slice(ndarray::s![input_dim.., ..]).to_owned())?;
        Ok(state)
    }

    /// Fraction of rows whose nearest proxy (by cosine) is their label.
    pub fn accuracy(&self, dataset: &Dataset) -> f64 {
        let z = self.embed(dataset.x.view());
        let scores = z.dot(&self.proxies.as_array().t());
        let hits = scores
            .rows()
            .into_iter()
            .zip(&dataset.labels)
            .filter(|(row, &y)| {
                let best = row.iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                );
                best.0 == y
            })
            .count();
        hits as f64 / dataset.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub steps: Vec<MetricRecord>,
    pub epochs: Vec<MetricRecord>,
    pub final_accuracy: f64,
}

impl TrainOutcome {
    pub fn epoch_column(&self, key: &str) -> Vec<f64> {
        self.epochs.iter().map(|r| r[key]).collect()
    }

    pub fn step_column(&self, key: &str) -> Vec<f64> {
        self.steps.iter().map(|r| r[key]).collect()
    }
}

/// Builds the configured dataset, including render channels if enabled.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = generate_dataset(&SyntheticSpec::from_config(cfg))?;
    if cfg.recon_augment {
        augment_with_renders(&ds, cfg.data_seed ^ 0x5eed)
    } else {
        Ok(ds)
    }
}

/// Generates the data from `cfg` and trains on it.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = build_dataset(cfg)?;
    train_on(cfg, &ds, out_dir)
}

fn record(pairs: &[(&str, f64)]) -> MetricRecord {
    pairs
        .iter()
        .map(|&(k, v)| (k.to_string(), v))
        .collect::<IndexMap<_, _>>()
}

fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("checkpoints").join(format!("{name}.lh2t"))
}

fn save_checkpoint(state: &TrainState, dir: &Path, name: &str) -> Result<()> {
    let path = checkpoint_path(dir, name);
    let parent = path.parent().expect("has parent");
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    write_tensor(&path, &state.to_checkpoint()?)
}

pub fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<TrainState> {
    TrainState::from_checkpoint(&read_tensor(path)?, cfg)
}

fn write_logs(dir: &Path, steps: &[MetricRecord], epochs: &[MetricRecord]) -> Result<()> {
    emit_metrics(steps, dir.join("metrics.csv"))?;
    emit_metrics(epochs, dir.join("epochs.csv"))
}

/// Mini-batch SGD with momentum on the margin-softmax loss plus the proxy
/// regularizers.
///
/// With `out_dir` set, writes `metrics.csv` (per step), `epochs.csv`,
/// and `checkpoints/epoch_XXX.lh2t`. A non-finite loss or gradient stops the
/// run; the last finite state is saved as `checkpoints/last_finite.lh2t`.
pub fn train_on(cfg: &RunConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let input_dim = dataset.x.ncols();
    if let Some(y) = dataset.labels.iter().find(|&&y| y >= cfg.num_classes) {
        return Err(Error::Domain(format!("label {y} outside 0..{}", cfg.num_classes)));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pcfg = proxy_config(cfg);
    let mut state = TrainState::init(cfg, input_dim);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let n = dataset.len();

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let lr = match cfg.lr_halve_every {
            0 => cfg.learning_rate,
            k => cfg.learning_rate * 0.5f64.powi((epoch / k) as i32),
        };
        let mid_used = state.mid.mid;
        let order = permutation(n, &mut state.rng);
        let (mut loss_sum, mut below, mut pad_sum) = (0.0, 0usize, 0.0);

        for chunk in order.chunks(cfg.batch_size) {
            let x = dataset.x.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let batch = EmbeddingBatch::new(state.embed(x.view()), labels)?;

            let margin = state.tracker.update(&batch);
            let selection = pp_selection(&batch.labels, cfg.num_classes, batch.len(), &mut state.rng);
            let mut report = uamf_loss(&batch, &state.proxies, margin, cfg.tau, cfg.vmf_dim)?;
            report.absorb(proxy_based_total_on(
                &batch,
                &state.proxies,
                &state.mid,
                &pcfg,
                &selection,
            )?);

            let z_hat = batch.normalized();
            let mut batch_below = 0usize;
            for (i, &y) in batch.labels.iter().enumerate() {
                let c = state.proxies.row(y).dot(&z_hat.row(i));
                pad_sum += c;
                if c < state.mid.mid {
                    batch_below += 1;
                }
            }
            below += batch_below;
            state.mid.observe(&batch, &state.proxies, cfg.mid_strict_mode);

            let grad_embedder = x.t().dot(&report.grad_z);
            let vel_embedder = &state.vel_embedder * cfg.momentum + &grad_embedder;
            let vel_proxies = &state.vel_proxies * cfg.momentum + &report.grad_w;
            let mut embedder = state.embedder.clone();
            embedder.scaled_add(-lr, &vel_embedder);
            let mut proxies = state.proxies.clone();
            proxies.as_array_mut().scaled_add(-lr, &vel_proxies);
            // an overflowing step also counts as divergence
            let finite = report.total.is_finite()
                && embedder.iter().chain(vel_embedder.iter()).all(|v| v.is_finite())
                && proxies
                    .as_array()
                    .iter()
                    .chain(vel_proxies.iter())
                    .all(|v| v.is_finite())
                && proxies.renormalize().is_ok();
            if !finite {
                if let Some(dir) = out_dir {
                    save_checkpoint(&state, dir, "last_finite")?;
                    write_logs(dir, &steps, &epochs)?;
                }
                return Err(Error::Divergence { step: state.step });
            }
            state.vel_embedder = vel_embedder;
            state.vel_proxies = vel_proxies;
            state.embedder = embedder;
            state.proxies = proxies;
            let norm_dev = state
                .proxies
                .as_array()
                .rows()
                .into_iter()
                .fold(0.0f64, |m, r| m.max((r.dot(&r).sqrt() - 1.0).abs()));

            let spread = proxy_spread_trackers(&state.proxies, cfg.num_classes, cfg.feature_dim, &selection);
            loss_sum += report.total * batch.len() as f64;
            steps.push(record(&[
                ("step", state.step as f64),
                ("epoch", epoch as f64),
                ("lr", lr),
                ("loss", report.total),
                ("vmf", report.term("vmf")),
                ("pps", report.term("pps")),
                ("pns", report.term("pns")),
                ("pp", report.term("pp")),
                ("sns", report.term("sns")),
                ("margin", margin),
                ("mu_norm", state.tracker.mu_norm),
                ("std", spread.std),
                ("std_mean", spread.std_mean),
                ("std_sns", sns_tracker(&batch)),
                ("mid", state.mid.mid),
                ("below_mid_frac", batch_below as f64 / batch.len() as f64),
                ("proxy_norm_dev", norm_dev),
            ]));
            state.step += 1;
        }

        state.mid = end_epoch(&state.mid, &pcfg);
        let all: Vec<usize> = (0..cfg.num_classes).collect();
        let spread = proxy_spread_trackers(&state.proxies, cfg.num_classes, cfg.feature_dim, &all);
        epochs.push(record(&[
            ("epoch", epoch as f64),
            ("lr", lr),
            ("loss_mean", loss_sum / n as f64),
            ("train_acc", state.accuracy(dataset)),
            ("mid_used", mid_used),
            ("below_mid_frac", below as f64 / n as f64),
            ("pad_mean", pad_sum / n as f64),
            ("next_mid", state.mid.mid),
            ("std", spread.std),
            ("std_mean", spread.std_mean),
        ]));
        if let Some(dir) = out_dir {
            save_checkpoint(&state, dir, &format!("epoch_{epoch:03}"))?;
        }
    }

    if let Some(dir) = out_dir {
        write_logs(dir, &steps, &epochs)?;
        std::fs::write(dir.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(dir.join("config.txt"), e))?;
    }
    let final_accuracy = state.accuracy(dataset);
    Ok(TrainOutcome {
        state,
        steps,
        epochs,
        final_accuracy,
    })
}
