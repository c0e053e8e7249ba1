//! Two-phase class-split training on synthetic Gaussian clusters with a
//! small MLP: phase 1 trains with loss weight 1 on the first class group
//! and 0 elsewhere, phase 2 flips the mask. Training accuracy of both
//! groups is recorded every epoch, which reproduces the characteristic
//! forgetting curves - the first group's accuracy drops rapidly once the
//! mask flips, because the softmax over all classes keeps suppressing the
//! now-unweighted classes.

use super::CollapseError;
use crate::datasets::{make_synthetic, ClassSplit, SyntheticSpec};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Which classes carry loss weight 1 in phase 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// The complement of the phase-1 group (the forgetting setup).
    FinetuneClasses,
    /// The same group as phase 1 (control: nothing should be forgotten).
    SameAsPhase1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub synthetic: SyntheticSpec,
    /// Hidden width of the two-layer perceptron.
    pub hidden: usize,
    pub activation: Activation,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate is divided by `lr_decay_factor` every
    /// `lr_decay_period` epochs of the active schedule.
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    pub batch_size: usize,
    /// Share of classes in the phase-1 group, split by label order.
    pub split_fraction: f64,
    pub phase2_mask: MaskMode,
    pub reinit_classifier: bool,
    pub reinit_optimizer: bool,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec {
                k: 10,
                p: 16,
                per_class_n: 100,
                cluster_separation: 3.0,
                noise_sigma: 1.0,
                seed: 0,
            },
            hidden: 64,
            activation: Activation::Relu,
            epochs_pretrain: 20,
            epochs_finetune: 20,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_factor: 10.0,
            lr_decay_period: 80,
            batch_size: 128,
            split_fraction: 0.5,
            phase2_mask: MaskMode::FinetuneClasses,
            reinit_classifier: false,
            reinit_optimizer: false,
            seed: 0,
        }
    }
}

impl ToyTrainConfig {
    fn validate(&self) -> Result<(), CollapseError> {
        self.synthetic.validate()?;
        if self.hidden == 0 {
            return Err(CollapseError::InvalidConfig(
                "hidden width must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(CollapseError::InvalidConfig(
                "batch size must be positive".into(),
            ));
        }
        if self.epochs_pretrain == 0 {
            return Err(CollapseError::InvalidConfig(
                "need at least one pretraining epoch".into(),
            ));
        }
        if self.lr_decay_period == 0 {
            return Err(CollapseError::InvalidConfig(
                "decay period must be positive".into(),
            ));
        }
        if self.split_fraction.is_nan() || self.split_fraction <= 0.0 || self.split_fraction > 1.0 {
            return Err(CollapseError::InvalidConfig(
                "split fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch training accuracy of the two class groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRun {
    pub pretrain_acc: Vec<f64>,
    pub finetune_acc: Vec<f64>,
    /// First epoch index of phase 2.
    pub phase_boundary: usize,
    pub config: ToyTrainConfig,
}

struct Mlp {
    w1: Array2<f64>, // p x hidden
    b1: Array1<f64>,
    w2: Array2<f64>, // hidden x K
    b2: Array1<f64>,
    activation: Activation,
}

impl Mlp {
    fn init(
        p: usize,
        hidden: usize,
        k: usize,
        activation: Activation,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self {
            w1: he_init(p, hidden, rng),
            b1: Array1::zeros(hidden),
            w2: he_init(hidden, k, rng),
            b2: Array1::zeros(k),
            activation,
        }
    }

    fn hidden(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut a = x.dot(&self.w1) + &self.b1;
        match self.activation {
            Activation::Relu => a.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => a.mapv_inplace(f64::tanh),
        }
        a
    }

    fn logits(&self, hidden: &Array2<f64>) -> Array2<f64> {
        hidden.dot(&self.w2) + &self.b2
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let logits = self.logits(&self.hidden(x));
        logits
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

fn he_init(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let scale = (2.0 / rows as f64).sqrt();
    let mut m = Array2::<f64>::zeros((rows, cols));
    m.mapv_inplace(|_| scale * standard_normal(rng));
    m
}

fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

struct Momentum {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl Momentum {
    fn zeros(net: &Mlp) -> Self {
        Self {
            w1: Array2::zeros(net.w1.dim()),
            b1: Array1::zeros(net.b1.dim()),
            w2: Array2::zeros(net.w2.dim()),
            b2: Array1::zeros(net.b2.dim()),
        }
    }
}

/// Run the two-phase training. Deterministic given the config (data,
/// initialization and shuffling all derive from `seed`). A non-finite loss
/// aborts with a divergence error.
pub fn train_toy(config: &ToyTrainConfig) -> Result<ForgettingRun, CollapseError> {
    config.validate()?;
    let (features, labels) = make_synthetic(&config.synthetic)?;
    let k = config.synthetic.k;
    let split = ClassSplit::by_fraction(k, config.split_fraction)?;
    let n = labels.len();

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(0x10_000));
    let mut net = Mlp::init(
        config.synthetic.p,
        config.hidden,
        k,
        config.activation,
        &mut rng,
    );
    let mut velocity = Momentum::zeros(&net);

    let pretrain_rows: Vec<usize> = (0..n)
        .filter(|&i| split.pretrain_classes.contains(&labels[i]))
        .collect();
    let finetune_rows: Vec<usize> = (0..n)
        .filter(|&i| split.finetune_classes.contains(&labels[i]))
        .collect();

    let group_accuracy = |net: &Mlp, rows: &[usize]| -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let x = features.select(Axis(0), rows);
        let predictions = net.predict(&x);
        let correct = rows
            .iter()
            .zip(&predictions)
            .filter(|(&row, &pred)| labels[row] == pred)
            .count();
        correct as f64 / rows.len() as f64
    };

    let total_epochs = config.epochs_pretrain + config.epochs_finetune;
    let mut run = ForgettingRun {
        pretrain_acc: Vec::with_capacity(total_epochs),
        finetune_acc: Vec::with_capacity(total_epochs),
        phase_boundary: config.epochs_pretrain,
        config: config.clone(),
    };

    // Epoch counter driving the lr schedule; restarted when the optimizer is
    // re-initialized at the phase boundary.
    let mut schedule_epoch = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..total_epochs {
        let phase2 = epoch >= config.epochs_pretrain;
        if phase2 && epoch == config.epochs_pretrain {
            if config.reinit_classifier {
                net.w2 = he_init(config.hidden, k, &mut rng);
                net.b2.fill(0.0);
            }
            if config.reinit_optimizer {
                velocity = Momentum::zeros(&net);
                schedule_epoch = 0;
            }
        }
        let mut class_weights = vec![0.0f64; k];
        let active: &[usize] = if !phase2 {
            &split.pretrain_classes
        } else {
            match config.phase2_mask {
                MaskMode::FinetuneClasses => &split.finetune_classes,
                MaskMode::SameAsPhase1 => &split.pretrain_classes,
            }
        };
        for &class in active {
            class_weights[class] = 1.0;
        }
        let lr = config.lr
            / config
                .lr_decay_factor
                .powi((schedule_epoch / config.lr_decay_period) as i32);

        shuffle(&mut order, &mut rng);
        for batch in order.chunks(config.batch_size) {
            let weight_sum: f64 = batch.iter().map(|&i| class_weights[labels[i]]).sum();
            if weight_sum == 0.0 {
                continue;
            }
            let x = features.select(Axis(0), batch);
            let hidden = net.hidden(&x);
            let logits = net.logits(&hidden);

            // Weighted softmax cross-entropy gradient w.r.t. logits.
            let mut delta = Array2::<f64>::zeros(logits.dim());
            let mut loss = 0.0;
            for (row, &sample) in batch.iter().enumerate() {
                let class = labels[sample];
                let weight = class_weights[class] / weight_sum;
                let z = logits.row(row);
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                loss += weight * (sum.ln() + max - z[class]);
                if weight > 0.0 {
                    for col in 0..k {
                        let p = (z[col] - max).exp() / sum;
                        delta[[row, col]] = weight * (p - if col == class { 1.0 } else { 0.0 });
                    }
                }
            }
            if !loss.is_finite() {
                return Err(CollapseError::Diverged {
                    epoch,
                    partial_curves: vec![
                        ("pretrain_acc".into(), run.pretrain_acc.clone()),
                        ("finetune_acc".into(), run.finetune_acc.clone()),
                    ],
                });
            }

            let grad_w2 = hidden.t().dot(&delta);
            let grad_b2 = delta.sum_axis(Axis(0));
            let mut back = delta.dot(&net.w2.t());
            match config.activation {
                Activation::Relu => {
                    back.zip_mut_with(&hidden, |g, &a| {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    });
                }
                Activation::Tanh => {
                    back.zip_mut_with(&hidden, |g, &a| *g *= 1.0 - a * a);
                }
            }
            let grad_w1 = x.t().dot(&back);
            let grad_b1 = back.sum_axis(Axis(0));

            sgd_step(&mut net.w1, &mut velocity.w1, &grad_w1, lr, config);
            sgd_step_b(&mut net.b1, &mut velocity.b1, &grad_b1, lr, config);
            sgd_step(&mut net.w2, &mut velocity.w2, &grad_w2, lr, config);
            sgd_step_b(&mut net.b2, &mut velocity.b2, &grad_b2, lr, config);
        }
        schedule_epoch += 1;
        run.pretrain_acc.push(group_accuracy(&net, &pretrain_rows));
        run.finetune_acc.push(group_accuracy(&net, &finetune_rows));
    }
    Ok(run)
}

fn sgd_step(
    param: &mut Array2<f64>,
    velocity: &mut Array2<f64>,
    grad: &Array2<f64>,
    lr: f64,
    config: &ToyTrainConfig,
) {
    velocity.zip_mut_with(grad, |v, &g| *v = config.momentum * *v + g);
    velocity.zip_mut_with(param, |v, &p| *v += config.weight_decay * p);
    param.zip_mut_with(velocity, |p, &v| *p -= lr * v);
}

fn sgd_step_b(
    param: &mut Array1<f64>,
    velocity: &mut Array1<f64>,
    grad: &Array1<f64>,
    lr: f64,
    config: &ToyTrainConfig,
) {
    velocity.zip_mut_with(grad, |v, &g| *v = config.momentum * *v + g);
    velocity.zip_mut_with(param, |v, &p| *v += config.weight_decay * p);
    param.zip_mut_with(velocity, |p, &v| *p -= lr * v);
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// The three standard runs - baseline, classifier re-initialized at the
/// phase boundary, optimizer re-initialized at the phase boundary - under a
/// shared seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinitComparison {
    pub baseline: ForgettingRun,
    pub reinit_classifier: ForgettingRun,
    pub reinit_optimizer: ForgettingRun,
}

impl ReinitComparison {
    pub fn series(&self) -> [(&'static str, &ForgettingRun); 3] {
        [
            ("baseline", &self.baseline),
            ("reinit_classifier", &self.reinit_classifier),
            ("reinit_optimizer", &self.reinit_optimizer),
        ]
    }
}

pub fn reinit_variants(config: &ToyTrainConfig) -> Result<ReinitComparison, CollapseError> {
    let baseline = train_toy(&ToyTrainConfig {
        reinit_classifier: false,
        reinit_optimizer: false,
        ..config.clone()
    })?;
    let reinit_classifier = train_toy(&ToyTrainConfig {
        reinit_classifier: true,
        reinit_optimizer: false,
        ..config.clone()
    })?;
    let reinit_optimizer = train_toy(&ToyTrainConfig {
        reinit_classifier: false,
        reinit_optimizer: true,
        ..config.clone()
    })?;
    Ok(ReinitComparison {
        baseline,
        reinit_classifier,
        reinit_optimizer,
    })
}
