//! A small decoder-only causal transformer with a trainable PAD embedding.
//!
//! Everything runs in `f64` on the CPU. Gradients are derived by hand in
//! [`network`]; the finite-difference checks in the tests keep them honest.

mod checkpoint;
mod network;
mod train;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedItem;
use crate::error::{LudError, Result};
use crate::identify::ProbabilityTrace;
use crate::TokenId;

pub use train::{train, Label, TrainOptions, TrainReport, TrainingBatchItem, IGNORE};

pub type Mat = Array2<f64>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 4 layers, width 128, 4 heads, 256 positions.
    pub fn desk_scale(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            max_seq_len: 256,
            vocab_size,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(LudError::InvalidArgument(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(LudError::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Per-layer weights. Row vectors (gains, biases) are stored as `1 x n` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub w_qkv: Mat,
    pub b_qkv: Mat,
    pub w_o: Mat,
    pub b_o: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
    pub w_fc: Mat,
    pub b_fc: Mat,
    pub w_proj: Mat,
    pub b_proj: Mat,
}

/// All trainable tensors. The same shape doubles as a gradient buffer and
/// as optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    /// Row `PAD` is trained like any other token row.
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub blocks: Vec<Block>,
    pub lnf_g: Mat,
    pub lnf_b: Mat,
    pub w_out: Mat,
    pub b_out: Mat,
}

const BLOCK_TENSORS: [&str; 12] = [
    "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o", "ln2_g", "ln2_b", "w_fc", "b_fc", "w_proj", "b_proj",
];

impl Block {
    fn tensors(&self) -> [&Mat; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_o,
            &self.b_o,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Mat; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

impl Params {
    fn init(cfg: &ModelConfig) -> Params {
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Mat::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
        };
        let resid_std = 0.02 / (2.0 * cfg.n_layers as f64).sqrt();
        let tok_emb = normal(cfg.vocab_size, d, 0.02);
        let pos_emb = normal(cfg.max_seq_len, d, 0.02);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1_g: Mat::ones((1, d)),
                ln1_b: Mat::zeros((1, d)),
                w_qkv: normal(d, 3 * d, 0.02),
                b_qkv: Mat::zeros((1, 3 * d)),
                w_o: normal(d, d, resid_std),
                b_o: Mat::zeros((1, d)),
                ln2_g: Mat::ones((1, d)),
                ln2_b: Mat::zeros((1, d)),
                w_fc: normal(d, 4 * d, 0.02),
                b_fc: Mat::zeros((1, 4 * d)),
                w_proj: normal(4 * d, d, resid_std),
                b_proj: Mat::zeros((1, d)),
            })
            .collect();
        Params {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Mat::ones((1, d)),
            lnf_b: Mat::zeros((1, d)),
            // small so that an untrained model predicts close to uniform
            w_out: normal(d, cfg.vocab_size, 0.005),
            b_out: Mat::zeros((1, cfg.vocab_size)),
        }
    }

    pub fn zeros_like(&self) -> Params {
        let mut p = self.clone();
        for t in p.tensors_mut() {
            t.fill(0.0);
        }
        p
    }

    /// Every tensor, in a fixed order shared with [`Params::names`].
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.w_out, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_out, &mut self.b_out]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.blocks.len() {
            out.extend(BLOCK_TENSORS.iter().map(|n| format!("blocks.{i}.{n}")));
        }
        out.extend(["lnf_g", "lnf_b", "w_out", "b_out"].map(String::from));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Decoder-only transformer: token + learned absolute position embeddings,
/// pre-norm attention/MLP blocks, final norm, untied output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalLM {
    config: ModelConfig,
    params: Params,
}

impl CausalLM {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(CausalLM { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn check_input(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(LudError::InvalidArgument("empty input sequence".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(LudError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(LudError::UnknownTokenId(bad));
        }
        Ok(())
    }

    /// Next-token distributions for every input position (`len x vocab`).
    /// Row `j` depends only on `input_ids[..=j]`.
    pub fn forward(&self, input_ids: &[TokenId]) -> Result<Mat> {
        self.check_input(input_ids)?;
        let (mut logits, _) = network::forward(&self.config, &self.params, input_ids);
        network::softmax_rows(&mut logits);
        Ok(logits)
    }

    /// Probability the model assigns to each ground-truth target token given
    /// the prompt and the true target prefix.
    pub fn teacher_forced_probs(&self, item: &TokenizedItem, bos_id: TokenId) -> Result<ProbabilityTrace> {
        let n = item.target_ids.len();
        if n == 0 {
            return Err(LudError::InvalidArgument(format!(
                "item {} has an empty target",
                item.item_id
            )));
        }
        let mut input = Vec::with_capacity(1 + item.prompt_ids.len() + n - 1);
        input.push(bos_id);
        input.extend(&item.prompt_ids);
        input.extend(&item.target_ids[..n - 1]);
        let probs = self.forward(&input)?;
        let offset = item.prompt_ids.len();
        let values = item
            .target_ids
            .iter()
            .enumerate()
            .map(|(i, &t)| probs[[offset + i, t as usize]])
            .collect();
        ProbabilityTrace::new(item.item_id.clone(), values)
    }

    /// Mean ignore-masked cross-entropy over `batch` and its gradient.
    pub fn loss_and_gradients(&self, batch: &[TrainingBatchItem]) -> Result<(f64, Params)> {
        let mut grads = self.params.zeros_like();
        let n_labels: usize = batch.iter().map(TrainingBatchItem::supervised).sum();
        if n_labels == 0 {
            return Err(LudError::InvalidArgument("batch has no supervised labels".into()));
        }
        let scale = 1.0 / n_labels as f64;
        let mut total = 0.0;
        for item in batch {
            self.check_input(&item.input_ids)?;
            total += network::loss_and_backward(&self.config, &self.params, item, scale, &mut grads);
        }
        Ok((total * scale, grads))
    }

    /// Mean ignore-masked cross-entropy without gradients.
    pub fn loss(&self, batch: &[TrainingBatchItem]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for item in batch {
            self.check_input(&item.input_ids)?;
            let (mut logits, _) = network::forward(&self.config, &self.params, &item.input_ids);
            network::log_softmax_rows(&mut logits);
            for (j, label) in item.label_ids.iter().enumerate() {
                if let Some(t) = label {
                    total -= logits[[j, *t as usize]];
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(LudError::InvalidArgument("no supervised labels".into()));
        }
        Ok(total / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS_ID, EOS_ID, PAD_ID};
    use rand::Rng;

    fn tiny(vocab: usize, seed: u64) -> CausalLM {
        CausalLM::new(ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            max_seq_len: 24,
            vocab_size: vocab,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk_scale(10);
        c.validate().unwrap();
        c.n_heads = 3;
        assert!(CausalLM::new(c).is_err());
    }

    #[test]
    fn distributions_are_normalized() {
        let m = tiny(11, 3);
        let probs = m.forward(&[1, 4, 5, 0, 0, 7]).unwrap();
        for row in probs.rows() {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn overlong_and_invalid_inputs_error() {
        let m = tiny(11, 3);
        let long = vec![4; 25];
        assert!(matches!(
            m.forward(&long),
            Err(LudError::SequenceTooLong { len: 25, max: 24 })
        ));
        assert!(matches!(m.forward(&[1, 11]), Err(LudError::UnknownTokenId(11))));
        assert!(m.forward(&[]).is_err());
    }

    #[test]
    fn suffix_changes_leave_prefix_bit_identical() {
        let m = tiny(13, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let len = rng.random_range(2..24);
            let a: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..13)).collect();
            let j = rng.random_range(1..len);
            let mut b = a.clone();
            for t in &mut b[j..] {
                *t = (*t + 1 + rng.random_range(0..12)) % 13;
            }
            let pa = m.forward(&a).unwrap();
            let pb = m.forward(&b).unwrap();
            for r in 0..j {
                assert_eq!(pa.row(r), pb.row(r), "row {r} changed after perturbing {j}");
            }
            // Dropping the suffix entirely must not change anything either.
            let pc = m.forward(&a[..j]).unwrap();
            for r in 0..j {
                assert_eq!(pa.row(r), pc.row(r));
            }
        }
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let v = 40;
        let m = CausalLM::new(ModelConfig::desk_scale(v)).unwrap();
        let item = TokenizedItem {
            item_id: "u".into(),
            prompt_ids: vec![5, 6, 7],
            target_ids: (3..39).chain([EOS_ID]).collect(),
        };
        let trace = m.teacher_forced_probs(&item, BOS_ID).unwrap();
        let uniform = 1.0 / v as f64;
        for &p in trace.probs() {
            assert!((p - uniform).abs() <= 0.5 * uniform, "{p} vs {uniform}");
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs())
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut m = CausalLM::new(ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            max_seq_len: 8,
            vocab_size: 9,
            seed: 11,
        })
        .unwrap();
        // Push weights away from init so every path carries signal.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in m.params_mut().tensors_mut() {
            t.mapv_inplace(|x| x + rng.random_range(-0.3..0.3));
        }
        let batch = vec![
            TrainingBatchItem::new(
                vec![BOS_ID, 4, 5, PAD_ID, PAD_ID],
                vec![None, Some(6), Some(7), Some(8), Some(3)],
            )
            .unwrap(),
            TrainingBatchItem::new(
                vec![BOS_ID, 3, 3, 8, 4, 5],
                vec![None, None, Some(8), Some(4), Some(5), Some(EOS_ID)],
            )
            .unwrap(),
        ];
        let (_, grads) = m.loss_and_gradients(&batch).unwrap();
        let grads = grads.tensors().into_iter().cloned().collect::<Vec<_>>();
        let n_tensors = grads.len();
        let eps = 1e-5;
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        while checked < 200 {
            let ti = rng.random_range(0..n_tensors);
            let (r, c) = grads[ti].dim();
            let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
            let analytic = grads[ti][[i, j]];
            let orig = m.params().tensors()[ti][[i, j]];
            m.params_mut().tensors_mut()[ti][[i, j]] = orig + eps;
            let up = m.loss(&batch).unwrap();
            m.params_mut().tensors_mut()[ti][[i, j]] = orig - eps;
            let down = m.loss(&batch).unwrap();
            m.params_mut().tensors_mut()[ti][[i, j]] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if analytic.abs() < 1e-9 && numeric.abs() < 1e-9 {
                continue; // untouched embedding rows
            }
            worst = worst.max(rel_err(analytic, numeric));
            checked += 1;
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }
}
