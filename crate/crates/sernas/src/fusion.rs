//! Decision-level fusion: the two branches' class probabilities feed a
//! fixed three-layer perceptron whose layer sizes are (8,8), (8,4), (4,4),
//! with a terminal softmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::label_tensor;
use crate::error::{Error, Result};
use crate::optim::{train_loop, AdamConfig, OptimizerState, TrainHistory};
use crate::space::LEAKY_RELU_SLOPE;
use crate::tape::{forward, Bindings, ParamGroup, ParamId, ParamStore, Tape};
use crate::tensor::Tensor;

pub const FUSION_LAYERS: [(usize, usize); 3] = [(8, 8), (8, 4), (4, 4)];

/// The fusion perceptron. Inputs `p_spec`/`p_w2v` are concatenated to
/// `[B, 8]`; outputs are `probs`, `logits`, `loss`.
pub struct FusionNet {
    pub tape: Tape,
    pub store: ParamStore,
    pub layer_params: Vec<(ParamId, ParamId)>,
    pub num_classes: usize,
}

impl FusionNet {
    pub fn build(seed: u64) -> Self {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer_params = Vec::with_capacity(FUSION_LAYERS.len());
        for (i, (fan_in, fan_out)) in FUSION_LAYERS.iter().enumerate() {
            let w = store.add(
                format!("fusion.l{i}.w"),
                Tensor::init_fan_in(&mut rng, &[*fan_in, *fan_out], *fan_in),
                ParamGroup::Weight,
            );
            let b = store.add(
                format!("fusion.l{i}.b"),
                Tensor::zeros(&[*fan_out]),
                ParamGroup::Weight,
            );
            layer_params.push((w, b));
        }

        let p_spec = tape.input("p_spec");
        let p_w2v = tape.input("p_w2v");
        let mut h = tape.concat(1, &[p_spec, p_w2v]);
        for (i, &(w, b)) in layer_params.iter().enumerate() {
            let (wv, bv) = (tape.param(w), tape.param(b));
            h = tape.affine(h, wv, bv);
            if i + 1 < FUSION_LAYERS.len() {
                h = tape.leaky_relu(h, LEAKY_RELU_SLOPE);
            }
        }
        let probs = tape.softmax(h);
        let labels = tape.input("labels");
        let loss = tape.cross_entropy(h, labels);
        tape.mark_output("logits", h);
        tape.mark_output("probs", probs);
        tape.mark_output("loss", loss);

        FusionNet {
            tape,
            store,
            layer_params,
            num_classes: 4,
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count(None)
    }

    /// Validate branch probabilities (rows nonnegative, summing to
    /// 1 +- 1e-4) and bind them.
    pub fn bindings(&self, p_spec: &Tensor, p_w2v: &Tensor, labels: &[usize]) -> Result<Bindings> {
        for (name, p) in [("p_spec", p_spec), ("p_w2v", p_w2v)] {
            validate_probability_rows(name, p, self.num_classes)?;
        }
        if p_spec.shape()[0] != p_w2v.shape()[0] {
            return Err(Error::ShapeMismatch {
                context: "fusion inputs".into(),
                detail: format!(
                    "batch sizes differ: {} vs {}",
                    p_spec.shape()[0],
                    p_w2v.shape()[0]
                ),
            });
        }
        let b = p_spec.shape()[0];
        let label_vec: Vec<usize> = if labels.is_empty() { vec![0; b] } else { labels.to_vec() };
        Ok(Bindings::new()
            .with("p_spec", p_spec.clone())
            .with("p_w2v", p_w2v.clone())
            .with("labels", label_tensor(&label_vec)))
    }

    /// Fused class probabilities for a batch of branch outputs.
    pub fn fuse(&self, p_spec: &Tensor, p_w2v: &Tensor) -> Result<Tensor> {
        let bind = self.bindings(p_spec, p_w2v, &[])?;
        forward(&self.tape, &self.store, &bind)?.output("probs")
    }
}

fn validate_probability_rows(name: &str, p: &Tensor, classes: usize) -> Result<()> {
    if p.rank() != 2 || p.shape()[1] != classes {
        return Err(Error::ShapeMismatch {
            context: format!("fusion input {name}"),
            detail: format!("expected [B, {classes}], got {:?}", p.shape()),
        });
    }
    for (r, row) in p.data().chunks(classes).enumerate() {
        let mut sum = 0.0f64;
        for &v in row {
            if !(0.0..=1.0 + 1e-4).contains(&v) {
                return Err(Error::InvalidData(format!(
                    "{name} row {r} holds {v}, not a probability"
                )));
            }
            sum += v as f64;
        }
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidData(format!(
                "{name} row {r} sums to {sum}, expected 1 within 1e-4"
            )));
        }
    }
    Ok(())
}

/// Aligned branch outputs for a set of utterances.
#[derive(Debug, Clone, Default)]
pub struct FusionExamples {
    pub ids: Vec<String>,
    pub p_spec: Vec<[f32; 4]>,
    pub p_w2v: Vec<[f32; 4]>,
    pub labels: Vec<usize>,
}

impl FusionExamples {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor, Vec<usize>) {
        let mut spec = Vec::with_capacity(idx.len() * 4);
        let mut w2v = Vec::with_capacity(idx.len() * 4);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            spec.extend_from_slice(&self.p_spec[i]);
            w2v.extend_from_slice(&self.p_w2v[i]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(vec![idx.len(), 4], spec).expect("shape"),
            Tensor::from_vec(vec![idx.len(), 4], w2v).expect("shape"),
            labels,
        )
    }

    /// Join per-branch outputs by utterance id. Every id must appear in
    /// both branches with the same label.
    pub fn align(
        spec: &[(String, [f32; 4], usize)],
        w2v: &[(String, [f32; 4], usize)],
    ) -> Result<Self> {
        let mut by_id: std::collections::BTreeMap<&str, (&[f32; 4], usize)> = Default::default();
        for (id, p, label) in w2v {
            by_id.insert(id.as_str(), (p, *label));
        }
        if spec.len() != w2v.len() {
            return Err(Error::InvalidData(format!(
                "branch outputs misaligned: {} spectrogram rows vs {} sequence rows",
                spec.len(),
                w2v.len()
            )));
        }
        let mut out = FusionExamples::default();
        for (id, p_spec, label) in spec {
            let Some((p_w2v, w2v_label)) = by_id.get(id.as_str()) else {
                return Err(Error::InvalidData(format!(
                    "utterance `{id}` missing from the sequence branch outputs"
                )));
            };
            if *w2v_label != *label {
                return Err(Error::InvalidData(format!(
                    "utterance `{id}` labeled {label} vs {w2v_label} across branches"
                )));
            }
            out.ids.push(id.clone());
            out.p_spec.push(*p_spec);
            out.p_w2v.push(**p_w2v);
            out.labels.push(*label);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionTrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        FusionTrainConfig {
            adam: AdamConfig::with_lr(1e-3),
            epochs: 100,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Cross-entropy training of the fusion net on aligned branch outputs,
/// tracking the best validation cross-entropy checkpoint.
pub fn train_fusion(
    net: &mut FusionNet,
    train: &FusionExamples,
    val: &FusionExamples,
    cfg: &FusionTrainConfig,
) -> Result<TrainHistory> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidData("fusion training needs nonempty splits".into()));
    }
    let mut opt = OptimizerState::adam(
        cfg.adam,
        &net.store,
        net.store.ids_in_group(ParamGroup::Weight),
    );
    let tape = std::mem::take(&mut net.tape);
    let val_idx: Vec<usize> = (0..val.len()).collect();
    let (val_spec, val_w2v, val_labels) = val.batch(&val_idx);
    let history = train_loop(
        &tape,
        &mut net.store,
        &mut opt,
        cfg.epochs,
        train.len(),
        cfg.batch_size,
        cfg.seed,
        |idx| {
            let (spec, w2v, labels) = train.batch(idx);
            Ok(Bindings::new()
                .with("p_spec", spec)
                .with("p_w2v", w2v)
                .with("labels", label_tensor(&labels)))
        },
        |tape, store| {
            let bind = Bindings::new()
                .with("p_spec", val_spec.clone())
                .with("p_w2v", val_w2v.clone())
                .with("labels", label_tensor(&val_labels));
            forward(tape, store, &bind)?.scalar("loss")
        },
    )?;
    net.tape = tape;
    Ok(history)
}

/// Argmax class per row.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let classes = *probs.shape().last().unwrap();
    probs
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}
