//! Frozen-encoder adapter simulator.
//!
//! The architecture mirrors the adapter-plus-head pattern of multimodal
//! models at desk scale: a fixed random projection encoder produces visual
//! features `Z_v`, a trainable linear adapter maps them into a text feature
//! space `H_v = W_a Z_v`, a fixed per-task query embedding `H_q` is
//! concatenated on, and a linear head classifies `[H_v, H_q]` over the
//! union of both tasks' classes.
//!
//! After joint pretraining on tasks A and B, the model is fine-tuned on
//! task A alone in one of two modes:
//!
//! * `Linear` - only the adapter trains; the head stays bit-identical.
//! * `Lora` - the adapter trains and the head additionally receives
//!   trainable rank-r additive deltas over frozen base weights.
//!
//! Tracking both tasks' accuracy across fine-tuning epochs shows the
//! low-rank head adaptation forgetting task B faster than the adapter-only
//! mode.

use super::CollapseError;
use crate::util::sha256_hex;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// Train the adapter only; head frozen.
    Linear,
    /// Train the adapter plus rank-r additive head deltas; base head frozen.
    Lora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSimConfig {
    pub mode: AdapterMode,
    /// Classes per task (two tasks share one output head).
    pub classes_per_task: usize,
    /// Visual input dimension.
    pub input_dim: usize,
    /// Frozen encoder output dimension.
    pub encoder_dim: usize,
    /// Text feature dimension (adapter output and query embedding size).
    pub text_dim: usize,
    pub per_class_n: usize,
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    /// Rank of the additive head deltas in lora mode.
    pub rank: usize,
    pub batch_size: usize,
    /// Delta contribution is scaled by `lora_scale / rank`.
    pub lora_scale: f64,
    /// Task query embeddings are `q_shared * q0 + q_delta * q_task`; a
    /// strong shared component is what lets head suppression learned on one
    /// task transfer to the other.
    pub q_shared: f64,
    pub q_delta: f64,
    pub seed: u64,
}

impl Default for AdapterSimConfig {
    fn default() -> Self {
        Self {
            mode: AdapterMode::Linear,
            classes_per_task: 5,
            input_dim: 16,
            encoder_dim: 32,
            text_dim: 16,
            per_class_n: 100,
            cluster_separation: 3.0,
            noise_sigma: 1.0,
            pretrain_epochs: 20,
            finetune_epochs: 3,
            lr_pretrain: 0.05,
            lr_finetune: 0.2,
            rank: 4,
            batch_size: 32,
            lora_scale: 2.0,
            q_shared: 1.0,
            q_delta: 0.3,
            seed: 0,
        }
    }
}

impl AdapterSimConfig {
    fn validate(&self) -> Result<(), CollapseError> {
        for (name, v) in [
            ("classes_per_task", self.classes_per_task),
            ("input_dim", self.input_dim),
            ("encoder_dim", self.encoder_dim),
            ("text_dim", self.text_dim),
            ("per_class_n", self.per_class_n),
            ("rank", self.rank),
            ("batch_size", self.batch_size),
            ("pretrain_epochs", self.pretrain_epochs),
        ] {
            if v == 0 {
                return Err(CollapseError::InvalidConfig(format!(
                    "{name} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Accuracy of both tasks per fine-tuning epoch (index 0 is the pretrained
/// model, before any fine-tuning), plus digests of the effective head
/// weights before and after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRun {
    pub mode: AdapterMode,
    pub task_a_acc: Vec<f64>,
    pub task_b_acc: Vec<f64>,
    pub head_digest_before: String,
    pub head_digest_after: String,
    pub seed: u64,
}

impl AdapterRun {
    /// Accuracy lost on task B over the fine-tuning run.
    pub fn task_b_drop(&self) -> f64 {
        self.task_b_acc.first().unwrap_or(&0.0) - self.task_b_acc.last().unwrap_or(&0.0)
    }
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

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((rows, cols));
    m.mapv_inplace(|_| scale * standard_normal(rng));
    m
}

fn gaussian_vec(len: usize, scale: f64, rng: &mut ChaCha12Rng) -> Array1<f64> {
    let mut v = Array1::<f64>::zeros(len);
    v.mapv_inplace(|_| scale * standard_normal(rng));
    v
}

/// Unit-direction Gaussian clusters for one task.
fn make_task(
    classes: usize,
    dim: usize,
    n: usize,
    separation: f64,
    sigma: f64,
    rng: &mut ChaCha12Rng,
) -> (Array2<f64>, Vec<usize>) {
    let mut x = Array2::<f64>::zeros((classes * n, dim));
    let mut y = Vec::with_capacity(classes * n);
    for class in 0..classes {
        let mut mean = gaussian_vec(dim, 1.0, rng);
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        mean.mapv_inplace(|v| separation * v / norm);
        for i in 0..n {
            let row = class * n + i;
            for d in 0..dim {
                x[[row, d]] = mean[d] + sigma * standard_normal(rng);
            }
            y.push(class);
        }
    }
    (x, y)
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn digest_head(head: &Array2<f64>, bias: &Array1<f64>) -> String {
    let mut bytes = Vec::with_capacity((head.len() + bias.len()) * 8);
    for v in head.iter().chain(bias.iter()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

/// Run the simulator: joint pretraining on A and B, then fine-tuning on A
/// alone in the configured mode, recording per-epoch accuracy on both
/// tasks. Deterministic given the config.
pub fn adapter_sim(config: &AdapterSimConfig) -> Result<AdapterRun, CollapseError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(0xADA9));
    let classes = config.classes_per_task;
    let k_total = 2 * classes;
    let (x_a, y_a) = make_task(
        classes,
        config.input_dim,
        config.per_class_n,
        config.cluster_separation,
        config.noise_sigma,
        &mut rng,
    );
    let (x_b, y_b_raw) = make_task(
        classes,
        config.input_dim,
        config.per_class_n,
        config.cluster_separation,
        config.noise_sigma,
        &mut rng,
    );
    let y_b: Vec<usize> = y_b_raw.iter().map(|&c| c + classes).collect();

    // Frozen pieces: encoder projection and the two task query embeddings.
    let encoder = gaussian(
        config.input_dim,
        config.encoder_dim,
        (2.0 / config.input_dim as f64).sqrt(),
        &mut rng,
    );
    let q0 = gaussian_vec(config.text_dim, 1.0, &mut rng);
    let q_a = &(config.q_shared * &q0) + &gaussian_vec(config.text_dim, config.q_delta, &mut rng);
    let q_b = &(config.q_shared * &q0) + &gaussian_vec(config.text_dim, config.q_delta, &mut rng);

    // Trainables: adapter, head (+ bias). Lora deltas come later.
    let mut adapter = gaussian(
        config.encoder_dim,
        config.text_dim,
        (2.0 / config.encoder_dim as f64).sqrt(),
        &mut rng,
    );
    let feature_dim = 2 * config.text_dim;
    let mut head = gaussian(
        feature_dim,
        k_total,
        (2.0 / feature_dim as f64).sqrt(),
        &mut rng,
    );
    let mut head_bias = Array1::<f64>::zeros(k_total);

    let encode = |x: &Array2<f64>| -> Array2<f64> {
        let mut z = x.dot(&encoder);
        z.mapv_inplace(|v| v.max(0.0));
        z
    };

    let concat_query = |h_v: &Array2<f64>, q: &Array1<f64>| -> Array2<f64> {
        let n = h_v.nrows();
        let mut f = Array2::<f64>::zeros((n, feature_dim));
        for row in 0..n {
            for d in 0..config.text_dim {
                f[[row, d]] = h_v[[row, d]];
                f[[row, config.text_dim + d]] = q[d];
            }
        }
        f
    };

    let accuracy = |adapter: &Array2<f64>,
                    head_eff: &Array2<f64>,
                    bias: &Array1<f64>,
                    x: &Array2<f64>,
                    y: &[usize],
                    q: &Array1<f64>|
     -> f64 {
        let features = concat_query(&encode(x).dot(adapter), q);
        let logits = features.dot(head_eff) + bias;
        let correct = logits
            .rows()
            .into_iter()
            .zip(y)
            .filter(|(row, &truth)| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    == Some(truth)
            })
            .count();
        correct as f64 / y.len() as f64
    };

    // Joint pretraining over the union of both tasks.
    let n_a = y_a.len();
    let n_all = n_a + y_b.len();
    let mut order: Vec<usize> = (0..n_all).collect();
    for _ in 0..config.pretrain_epochs {
        shuffle(&mut order, &mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut xb = Array2::<f64>::zeros((batch.len(), config.input_dim));
            let mut yb = Vec::with_capacity(batch.len());
            let mut from_a = Vec::with_capacity(batch.len());
            for (row, &idx) in batch.iter().enumerate() {
                if idx < n_a {
                    xb.row_mut(row).assign(&x_a.row(idx));
                    yb.push(y_a[idx]);
                    from_a.push(true);
                } else {
                    xb.row_mut(row).assign(&x_b.row(idx - n_a));
                    yb.push(y_b[idx - n_a]);
                    from_a.push(false);
                }
            }
            let z = encode(&xb);
            let h_v = z.dot(&adapter);
            let mut features = Array2::<f64>::zeros((batch.len(), feature_dim));
            for row in 0..batch.len() {
                let q = if from_a[row] { &q_a } else { &q_b };
                for d in 0..config.text_dim {
                    features[[row, d]] = h_v[[row, d]];
                    features[[row, config.text_dim + d]] = q[d];
                }
            }
            let mut probs = features.dot(&head) + &head_bias;
            softmax_rows(&mut probs);
            let scale = 1.0 / batch.len() as f64;
            for (row, &truth) in yb.iter().enumerate() {
                probs[[row, truth]] -= 1.0;
            }
            probs.mapv_inplace(|v| v * scale);
            let grad_head = features.t().dot(&probs);
            let grad_bias = probs.sum_axis(Axis(0));
            let back = probs.dot(&head.t());
            let back_hv = back.slice(ndarray::s![.., ..config.text_dim]).to_owned();
            let grad_adapter = z.t().dot(&back_hv);
            head.zip_mut_with(&grad_head, |p, &g| *p -= config.lr_pretrain * g);
            head_bias.zip_mut_with(&grad_bias, |p, &g| *p -= config.lr_pretrain * g);
            adapter.zip_mut_with(&grad_adapter, |p, &g| *p -= config.lr_pretrain * g);
        }
    }

    // Lora deltas: standard shape, B starts at zero so the effective head
    // begins exactly at the pretrained weights.
    let delta_scale = config.lora_scale / config.rank as f64;
    let mut lora_down = gaussian(config.rank, k_total, 1.0, &mut rng); // A
    let mut lora_up = Array2::<f64>::zeros((feature_dim, config.rank)); // B
    let effective_head =
        |head: &Array2<f64>, up: &Array2<f64>, down: &Array2<f64>| -> Array2<f64> {
            match config.mode {
                AdapterMode::Linear => head.clone(),
                AdapterMode::Lora => head + &(delta_scale * up.dot(down)),
            }
        };

    let head_digest_before = digest_head(&effective_head(&head, &lora_up, &lora_down), &head_bias);
    let base_head_snapshot = head.clone();

    let mut task_a_acc = vec![accuracy(
        &adapter,
        &effective_head(&head, &lora_up, &lora_down),
        &head_bias,
        &x_a,
        &y_a,
        &q_a,
    )];
    let mut task_b_acc = vec![accuracy(
        &adapter,
        &effective_head(&head, &lora_up, &lora_down),
        &head_bias,
        &x_b,
        &y_b,
        &q_b,
    )];

    // Fine-tune on task A only.
    let mut order_a: Vec<usize> = (0..n_a).collect();
    for epoch in 0..config.finetune_epochs {
        shuffle(&mut order_a, &mut rng);
        for batch in order_a.chunks(config.batch_size) {
            let xb = x_a.select(Axis(0), batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y_a[i]).collect();
            let z = encode(&xb);
            let h_v = z.dot(&adapter);
            let features = concat_query(&h_v, &q_a);
            let head_eff = effective_head(&head, &lora_up, &lora_down);
            let mut probs = features.dot(&head_eff) + &head_bias;
            softmax_rows(&mut probs);
            let scale = 1.0 / batch.len() as f64;
            for (row, &truth) in yb.iter().enumerate() {
                probs[[row, truth]] -= 1.0;
            }
            probs.mapv_inplace(|v| v * scale);
            let back = probs.dot(&head_eff.t());
            let back_hv = back.slice(ndarray::s![.., ..config.text_dim]).to_owned();
            let grad_adapter = z.t().dot(&back_hv);
            adapter.zip_mut_with(&grad_adapter, |p, &g| *p -= config.lr_finetune * g);
            if config.mode == AdapterMode::Lora {
                let grad_full = features.t().dot(&probs); // d loss / d head_eff
                let grad_up = delta_scale * grad_full.dot(&lora_down.t());
                let grad_down = delta_scale * lora_up.t().dot(&grad_full);
                lora_up.zip_mut_with(&grad_up, |p, &g| *p -= config.lr_finetune * g);
                lora_down.zip_mut_with(&grad_down, |p, &g| *p -= config.lr_finetune * g);
            }
        }
        let head_eff = effective_head(&head, &lora_up, &lora_down);
        if head_eff.iter().any(|v| !v.is_finite()) || adapter.iter().any(|v| !v.is_finite()) {
            return Err(CollapseError::Diverged {
                epoch,
                partial_curves: vec![
                    ("task_a_acc".into(), task_a_acc),
                    ("task_b_acc".into(), task_b_acc),
                ],
            });
        }
        task_a_acc.push(accuracy(&adapter, &head_eff, &head_bias, &x_a, &y_a, &q_a));
        task_b_acc.push(accuracy(&adapter, &head_eff, &head_bias, &x_b, &y_b, &q_b));
    }

    // The base head must never move during fine-tuning, in either mode.
    debug_assert_eq!(base_head_snapshot, head);

    let head_digest_after = digest_head(&effective_head(&head, &lora_up, &lora_down), &head_bias);
    Ok(AdapterRun {
        mode: config.mode,
        task_a_acc,
        task_b_acc,
        head_digest_before,
        head_digest_after,
        seed: config.seed,
    })
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_mode_keeps_head_bit_identical() {
        let run = adapter_sim(&AdapterSimConfig::default()).unwrap();
        assert_eq!(run.head_digest_before, run.head_digest_after);
    }

    #[test]
    fn lora_mode_changes_effective_head() {
        let run = adapter_sim(&AdapterSimConfig {
            mode: AdapterMode::Lora,
            ..AdapterSimConfig::default()
        })
        .unwrap();
        assert_ne!(run.head_digest_before, run.head_digest_after);
    }

    #[test]
    fn zero_finetune_epochs_modes_agree() {
        let base = AdapterSimConfig {
            finetune_epochs: 0,
            ..AdapterSimConfig::default()
        };
        let linear = adapter_sim(&base.clone()).unwrap();
        let lora = adapter_sim(&AdapterSimConfig {
            mode: AdapterMode::Lora,
            ..base
        })
        .unwrap();
        assert_eq!(linear.task_a_acc, lora.task_a_acc);
        assert_eq!(linear.task_b_acc, lora.task_b_acc);
        assert_eq!(linear.task_a_acc.len(), 1);
    }

    #[test]
    fn curves_have_epoch_plus_one_points() {
        let run = adapter_sim(&AdapterSimConfig::default()).unwrap();
        assert_eq!(run.task_a_acc.len(), 4);
        assert_eq!(run.task_b_acc.len(), 4);
    }

    #[test]
    fn deterministic_given_seed() {
        let config = AdapterSimConfig::default();
        let a = adapter_sim(&config).unwrap();
        let b = adapter_sim(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pretraining_learns_both_tasks() {
        let run = adapter_sim(&AdapterSimConfig::default()).unwrap();
        assert!(
            run.task_a_acc[0] >= 0.7,
            "task A pretrain acc {}",
            run.task_a_acc[0]
        );
        assert!(
            run.task_b_acc[0] >= 0.7,
            "task B pretrain acc {}",
            run.task_b_acc[0]
        );
    }

    #[test]
    fn lora_forgets_task_b_at_least_as_much_as_linear() {
        let mut linear_drop = 0.0;
        let mut lora_drop = 0.0;
        for seed in 0..5 {
            let linear = adapter_sim(&AdapterSimConfig {
                seed,
                ..AdapterSimConfig::default()
            })
            .unwrap();
            let lora = adapter_sim(&AdapterSimConfig {
                mode: AdapterMode::Lora,
                seed,
                ..AdapterSimConfig::default()
            })
            .unwrap();
            assert_eq!(linear.task_b_acc[0], lora.task_b_acc[0]);
            linear_drop += linear.task_b_drop();
            lora_drop += lora.task_b_drop();
        }
        assert!(
            lora_drop >= linear_drop,
            "lora total drop {lora_drop} vs linear {linear_drop}"
        );
    }
}
