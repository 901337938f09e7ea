use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CausalLM, Params};
use crate::corpus::TokenizedItem;
use crate::error::{LudError, Result};
use crate::TokenId;

/// Supervision target for one input position; `None` is excluded from the loss.
pub type Label = Option<TokenId>;

pub const IGNORE: Label = None;

/// `label_ids[j]` is the token the model should predict at input position `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawBatchItem")]
pub struct TrainingBatchItem {
    pub input_ids: Vec<TokenId>,
    pub label_ids: Vec<Label>,
}

#[derive(Deserialize)]
struct RawBatchItem {
    input_ids: Vec<TokenId>,
    label_ids: Vec<Label>,
}

impl TryFrom<RawBatchItem> for TrainingBatchItem {
    type Error = LudError;

    fn try_from(r: RawBatchItem) -> Result<Self> {
        TrainingBatchItem::new(r.input_ids, r.label_ids)
    }
}

impl TrainingBatchItem {
    pub fn new(input_ids: Vec<TokenId>, label_ids: Vec<Label>) -> Result<Self> {
        if input_ids.len() != label_ids.len() {
            return Err(LudError::InvalidArgument(format!(
                "{} inputs but {} labels",
                input_ids.len(),
                label_ids.len()
            )));
        }
        if label_ids.iter().all(Option::is_none) {
            return Err(LudError::InvalidArgument("every label is IGNORE".into()));
        }
        Ok(TrainingBatchItem { input_ids, label_ids })
    }

    /// Standard auto-regressive instance: `BOS + prompt + target[..n-1]` as
    /// input, each target token supervised at the position just before it.
    pub fn from_item(item: &TokenizedItem, bos_id: TokenId) -> Result<Self> {
        let n = item.target_ids.len();
        if n == 0 {
            return Err(LudError::InvalidArgument(format!(
                "item {} has an empty target",
                item.item_id
            )));
        }
        let p = item.prompt_ids.len();
        let mut input = Vec::with_capacity(p + n);
        input.push(bos_id);
        input.extend(&item.prompt_ids);
        input.extend(&item.target_ids[..n - 1]);
        let labels = std::iter::repeat_n(IGNORE, p)
            .chain(item.target_ids.iter().map(|&t| Some(t)))
            .collect();
        TrainingBatchItem::new(input, labels)
    }

    pub fn supervised(&self) -> usize {
        self.label_ids.iter().filter(|l| l.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Label-weighted mean training loss of each epoch, in order.
    pub loss_history: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const CLIP_NORM: f64 = 1.0;

struct Adam {
    m: Params,
    v: Params,
    step: i32,
}

impl Adam {
    fn new(p: &Params) -> Self {
        Adam {
            m: p.zeros_like(),
            v: p.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step);
        let bc2 = 1.0 - BETA2.powi(self.step);
        let norm = grads
            .tensors()
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if norm > CLIP_NORM { CLIP_NORM / norm } else { 1.0 };
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * clip;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            });
        }
    }
}

/// Adam with global-norm clipping over seeded shuffles of `instances`.
///
/// Single-threaded; the trajectory is a pure function of the model, the
/// instances (in order) and `opts`.
pub fn train(model: &mut CausalLM, instances: &[TrainingBatchItem], opts: &TrainOptions) -> Result<TrainReport> {
    if instances.is_empty() {
        return Err(LudError::InvalidArgument("no training instances".into()));
    }
    if opts.batch_size == 0 || opts.lr.is_nan() || opts.lr <= 0.0 {
        return Err(LudError::InvalidArgument("batch_size and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(model.params());
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut loss_history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        let mut labels = 0usize;
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            let batch: Vec<TrainingBatchItem> = chunk.iter().map(|&i| instances[i].clone()).collect();
            let (loss, grads) = model.loss_and_gradients(&batch)?;
            if !loss.is_finite() {
                return Err(LudError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    value: loss,
                });
            }
            let n: usize = batch.iter().map(TrainingBatchItem::supervised).sum();
            weighted += loss * n as f64;
            labels += n;
            adam.update(&mut model.params, &grads, opts.lr);
        }
        let mean = weighted / labels as f64;
        tracing::debug!(epoch, loss = mean, "epoch done");
        loss_history.push(mean);
    }
    Ok(TrainReport { loss_history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS_ID, EOS_ID, PAD_ID};
    use crate::model::ModelConfig;

    fn small_model() -> CausalLM {
        CausalLM::new(ModelConfig {
            n_layers: 1,
            d_model: 32,
            n_heads: 2,
            max_seq_len: 32,
            vocab_size: 12,
            seed: 4,
        })
        .unwrap()
    }

    fn item() -> TokenizedItem {
        TokenizedItem {
            item_id: "0".into(),
            prompt_ids: vec![3, 4],
            target_ids: vec![5, 6, 7, 8, 9, 10, 11, EOS_ID],
        }
    }

    #[test]
    fn all_ignore_is_rejected() {
        assert!(TrainingBatchItem::new(vec![BOS_ID, 3], vec![IGNORE, IGNORE]).is_err());
        assert!(TrainingBatchItem::new(vec![BOS_ID, 3], vec![IGNORE]).is_err());
        let json = r#"{"input_ids":[1,3],"label_ids":[null,null]}"#;
        assert!(serde_json::from_str::<TrainingBatchItem>(json).is_err());
    }

    #[test]
    fn ar_instance_layout() {
        let inst = TrainingBatchItem::from_item(&item(), BOS_ID).unwrap();
        assert_eq!(inst.input_ids, vec![BOS_ID, 3, 4, 5, 6, 7, 8, 9, 10, 11]);
        assert_eq!(inst.label_ids[..2], [IGNORE, IGNORE]);
        assert_eq!(inst.label_ids[2], Some(5));
        assert_eq!(*inst.label_ids.last().unwrap(), Some(EOS_ID));
        assert!(!inst.input_ids.contains(&PAD_ID));
    }

    #[test]
    fn memorizes_a_single_item() {
        let mut m = small_model();
        let inst = vec![TrainingBatchItem::from_item(&item(), BOS_ID).unwrap()];
        let opts = TrainOptions {
            epochs: 200,
            lr: 3e-3,
            batch_size: 1,
            seed: 0,
        };
        let report = train(&mut m, &inst, &opts).unwrap();
        assert!(
            *report.loss_history.last().unwrap() < 0.01,
            "{:?}",
            report.loss_history.last()
        );
        assert!(report.loss_history.last() < report.loss_history.first());
        let trace = m.teacher_forced_probs(&item(), BOS_ID).unwrap();
        assert!(trace.probs().iter().all(|&p| p > 0.99), "{:?}", trace.probs());
    }

    #[test]
    fn same_seed_same_history() {
        let inst: Vec<_> = (0..4)
            .map(|i| {
                let mut it = item();
                it.target_ids.rotate_left(i);
                it.target_ids.retain(|&t| t != EOS_ID);
                it.target_ids.push(EOS_ID);
                TrainingBatchItem::from_item(&it, BOS_ID).unwrap()
            })
            .collect();
        let opts = TrainOptions {
            epochs: 5,
            lr: 1e-3,
            batch_size: 2,
            seed: 9,
        };
        let (mut a, mut b) = (small_model(), small_model());
        let ra = train(&mut a, &inst, &opts).unwrap();
        let rb = train(&mut b, &inst, &opts).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn pad_row_is_trained() {
        let mut m = small_model();
        let before = m.params().tok_emb.row(PAD_ID as usize).to_owned();
        let inst =
            vec![
                TrainingBatchItem::new(vec![BOS_ID, 3, PAD_ID, PAD_ID], vec![IGNORE, Some(4), Some(5), Some(6)])
                    .unwrap(),
            ];
        let opts = TrainOptions {
            epochs: 1,
            lr: 1e-2,
            batch_size: 1,
            seed: 0,
        };
        train(&mut m, &inst, &opts).unwrap();
        assert_ne!(m.params().tok_emb.row(PAD_ID as usize), before);
    }

    #[test]
    fn empty_instance_list_errors() {
        let mut m = small_model();
        let opts = TrainOptions {
            epochs: 1,
            lr: 1e-3,
            batch_size: 1,
            seed: 0,
        };
        assert!(train(&mut m, &[], &opts).is_err());
    }
}
