//! Canonical CNN and RNN candidate operation sets and their shape/arity
//! semantics. Both sets are closed so the brute-force enumeration oracles
//! stay tractable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{ParamGroup, ParamId, ParamStore, PrimitiveOp, Tape, ValueId};
use crate::tensor::Tensor;

pub const LEAKY_RELU_SLOPE: f32 = 0.01;

/// The eight convolutional candidates. Every member preserves spatial size
/// at stride 1 (via padding) and halves it (ceil) at stride 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CnnOpKind {
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
    #[serde(rename = "none")]
    None,
}

impl CnnOpKind {
    pub const ALL: [CnnOpKind; 8] = [
        CnnOpKind::MaxPool3x3,
        CnnOpKind::AvgPool3x3,
        CnnOpKind::SkipConnect,
        CnnOpKind::SepConv3x3,
        CnnOpKind::SepConv5x5,
        CnnOpKind::DilConv3x3,
        CnnOpKind::DilConv5x5,
        CnnOpKind::None,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CnnOpKind::MaxPool3x3 => "max_pool_3x3",
            CnnOpKind::AvgPool3x3 => "avg_pool_3x3",
            CnnOpKind::SkipConnect => "skip_connect",
            CnnOpKind::SepConv3x3 => "sep_conv_3x3",
            CnnOpKind::SepConv5x5 => "sep_conv_5x5",
            CnnOpKind::DilConv3x3 => "dil_conv_3x3",
            CnnOpKind::DilConv5x5 => "dil_conv_5x5",
            CnnOpKind::None => "none",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }

    pub fn is_none(&self) -> bool {
        matches!(self, CnnOpKind::None)
    }

    /// (depthwise kernel, dilation), for the conv candidates.
    fn conv_geometry(&self) -> Option<(usize, usize)> {
        match self {
            CnnOpKind::SepConv3x3 => Some((3, 1)),
            CnnOpKind::SepConv5x5 => Some((5, 1)),
            CnnOpKind::DilConv3x3 => Some((3, 2)),
            CnnOpKind::DilConv5x5 => Some((5, 2)),
            _ => None,
        }
    }
}

/// Learned weights owned by one op instance on one edge, at a fixed
/// channel width.
#[derive(Debug, Clone)]
pub struct CnnOpParams {
    pub channels: usize,
    pub params: Vec<ParamId>,
}

/// Allocate the parameters `kind` needs at `channels` width. Convolutions
/// get fan-in uniform init; biases start at zero.
pub fn create_cnn_op_params<R: rand::Rng>(
    kind: CnnOpKind,
    store: &mut ParamStore,
    rng: &mut R,
    channels: usize,
    stride: usize,
    prefix: &str,
) -> CnnOpParams {
    let c = channels;
    let mut params = Vec::new();
    let mut add = |store: &mut ParamStore, suffix: &str, t: Tensor| {
        params.push(store.add(
            format!("{prefix}.{}.{suffix}", kind.name()),
            t,
            ParamGroup::Weight,
        ));
    };
    match kind {
        CnnOpKind::SepConv3x3
        | CnnOpKind::SepConv5x5
        | CnnOpKind::DilConv3x3
        | CnnOpKind::DilConv5x5 => {
            let (k, _) = kind.conv_geometry().unwrap();
            add(store, "dw", Tensor::init_fan_in(rng, &[c, 1, k, k], k * k));
            add(store, "pw", Tensor::init_fan_in(rng, &[c, c, 1, 1], c));
            add(store, "pw_bias", Tensor::zeros(&[c]));
        }
        CnnOpKind::SkipConnect if stride == 2 => {
            // factorized channel-preserving reduction: two stride-2 1x1
            // convs splitting the output channels, concatenated back to c
            let c1 = c - c / 2;
            let c2 = c / 2;
            add(store, "reduce1", Tensor::init_fan_in(rng, &[c1, c, 1, 1], c));
            if c2 > 0 {
                add(store, "reduce2", Tensor::init_fan_in(rng, &[c2, c, 1, 1], c));
            }
        }
        _ => {}
    }
    CnnOpParams { channels: c, params }
}

/// Apply one convolutional candidate to `x` ([B,C,H,W]) on the tape.
/// Output spatial size equals the input at stride 1 and `ceil(dim/2)` at
/// stride 2; `none` yields zeros of the target shape.
pub fn cnn_op_apply(
    tape: &mut Tape,
    kind: CnnOpKind,
    x: ValueId,
    stride: usize,
    op_params: &CnnOpParams,
) -> Result<ValueId> {
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidConfig(format!(
            "stride must be 1 or 2, got {stride}"
        )));
    }
    let out = match kind {
        CnnOpKind::MaxPool3x3 => tape.apply(
            PrimitiveOp::MaxPool2d {
                kernel: 3,
                stride,
                padding: 1,
            },
            &[x],
        ),
        CnnOpKind::AvgPool3x3 => tape.apply(
            PrimitiveOp::AvgPool2d {
                kernel: 3,
                stride,
                padding: 1,
            },
            &[x],
        ),
        CnnOpKind::SkipConnect => {
            if stride == 1 {
                x
            } else {
                let mut halves = Vec::new();
                for &w in &op_params.params {
                    let wv = tape.param(w);
                    halves.push(tape.apply(
                        PrimitiveOp::Conv2d {
                            stride: 2,
                            padding: 0,
                            dilation: 1,
                            groups: 1,
                        },
                        &[x, wv],
                    ));
                }
                match halves.len() {
                    0 => {
                        return Err(Error::InvalidConfig(
                            "skip_connect at stride 2 needs reduction params".into(),
                        ))
                    }
                    1 => halves[0],
                    _ => tape.concat(1, &halves),
                }
            }
        }
        CnnOpKind::SepConv3x3
        | CnnOpKind::SepConv5x5
        | CnnOpKind::DilConv3x3
        | CnnOpKind::DilConv5x5 => {
            let (k, dilation) = kind.conv_geometry().unwrap();
            let padding = dilation * (k - 1) / 2;
            let dw = tape.param(op_params.params[0]);
            let pw = tape.param(op_params.params[1]);
            let pb = tape.param(op_params.params[2]);
            // depthwise conv carries the stride; pointwise 1x1 mixes channels
            let depthwise = tape.apply(
                PrimitiveOp::Conv2d {
                    stride,
                    padding,
                    dilation,
                    groups: op_params.channels,
                },
                &[x, dw],
            );
            tape.apply(
                PrimitiveOp::Conv2d {
                    stride: 1,
                    padding: 0,
                    dilation: 1,
                    groups: 1,
                },
                &[depthwise, pw, pb],
            )
        }
        CnnOpKind::None => {
            let down = if stride == 2 {
                tape.apply(
                    PrimitiveOp::AvgPool2d {
                        kernel: 1,
                        stride: 2,
                        padding: 0,
                    },
                    &[x],
                )
            } else {
                x
            };
            tape.scale(down, 0.0)
        }
    };
    Ok(out)
}

/// The seven recurrent-cell candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RnnOpKind {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "blend")]
    Blend,
    #[serde(rename = "elementwise_product")]
    ElementwiseProduct,
    #[serde(rename = "elementwise_sum")]
    ElementwiseSum,
    #[serde(rename = "tanh_act")]
    TanhAct,
    #[serde(rename = "sigmoid_act")]
    SigmoidAct,
    #[serde(rename = "leaky_relu_act")]
    LeakyReluAct,
}

impl RnnOpKind {
    pub const ALL: [RnnOpKind; 7] = [
        RnnOpKind::Linear,
        RnnOpKind::Blend,
        RnnOpKind::ElementwiseProduct,
        RnnOpKind::ElementwiseSum,
        RnnOpKind::TanhAct,
        RnnOpKind::SigmoidAct,
        RnnOpKind::LeakyReluAct,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RnnOpKind::Linear => "linear",
            RnnOpKind::Blend => "blend",
            RnnOpKind::ElementwiseProduct => "elementwise_product",
            RnnOpKind::ElementwiseSum => "elementwise_sum",
            RnnOpKind::TanhAct => "tanh_act",
            RnnOpKind::SigmoidAct => "sigmoid_act",
            RnnOpKind::LeakyReluAct => "leaky_relu_act",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }

    /// Tensor operand count: linear and activations take 1, products and
    /// sums take 2, blend takes 3 (gate, then the two mixed operands).
    pub fn arity(&self) -> usize {
        match self {
            RnnOpKind::Linear
            | RnnOpKind::TanhAct
            | RnnOpKind::SigmoidAct
            | RnnOpKind::LeakyReluAct => 1,
            RnnOpKind::ElementwiseProduct | RnnOpKind::ElementwiseSum => 2,
            RnnOpKind::Blend => 3,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, RnnOpKind::Linear)
    }
}

/// Learned weights for one recurrent op instance (only `linear` has any).
#[derive(Debug, Clone, Default)]
pub struct RnnOpParams {
    pub params: Vec<ParamId>,
}

pub fn create_rnn_op_params<R: rand::Rng>(
    kind: RnnOpKind,
    store: &mut ParamStore,
    rng: &mut R,
    hidden: usize,
    prefix: &str,
) -> RnnOpParams {
    let mut params = Vec::new();
    if kind.has_params() {
        params.push(store.add(
            format!("{prefix}.linear.w"),
            Tensor::init_fan_in(rng, &[hidden, hidden], hidden),
            ParamGroup::Weight,
        ));
        params.push(store.add(
            format!("{prefix}.linear.b"),
            Tensor::zeros(&[hidden]),
            ParamGroup::Weight,
        ));
    }
    RnnOpParams { params }
}

/// Apply one recurrent candidate to `[B,h]` operands on the tape.
/// `blend(z, a, b) = sigmoid(z) * a + (1 - sigmoid(z)) * b`.
pub fn rnn_op_apply(
    tape: &mut Tape,
    kind: RnnOpKind,
    operands: &[ValueId],
    op_params: &RnnOpParams,
) -> Result<ValueId> {
    if operands.len() != kind.arity() {
        return Err(Error::InvalidCell(format!(
            "{} expects {} operands, got {}",
            kind.name(),
            kind.arity(),
            operands.len()
        )));
    }
    let out = match kind {
        RnnOpKind::Linear => {
            let w = tape.param(op_params.params[0]);
            let b = tape.param(op_params.params[1]);
            tape.affine(operands[0], w, b)
        }
        RnnOpKind::Blend => {
            let gate = tape.sigmoid(operands[0]);
            // 1 - sigmoid(z) == sigmoid(-z)
            let neg = tape.scale(operands[0], -1.0);
            let gate_inv = tape.sigmoid(neg);
            let lhs = tape.mul(gate, operands[1]);
            let rhs = tape.mul(gate_inv, operands[2]);
            tape.add(lhs, rhs)
        }
        RnnOpKind::ElementwiseProduct => tape.mul(operands[0], operands[1]),
        RnnOpKind::ElementwiseSum => tape.add(operands[0], operands[1]),
        RnnOpKind::TanhAct => tape.tanh(operands[0]),
        RnnOpKind::SigmoidAct => tape.sigmoid(operands[0]),
        RnnOpKind::LeakyReluAct => tape.leaky_relu(operands[0], LEAKY_RELU_SLOPE),
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{forward, Bindings};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn apply_cnn(kind: CnnOpKind, stride: usize, input: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let channels = input.shape()[1];
        let params = create_cnn_op_params(kind, &mut store, &mut rng, channels, stride, "t");
        let x = tape.input("x");
        let y = cnn_op_apply(&mut tape, kind, x, stride, &params).unwrap();
        tape.mark_output("y", y);
        let pass = forward(&tape, &store, &Bindings::new().with("x", input)).unwrap();
        pass.output("y").unwrap()
    }

    #[test]
    fn cardinality_is_eight_and_seven() {
        assert_eq!(CnnOpKind::ALL.len(), 8);
        assert_eq!(RnnOpKind::ALL.len(), 7);
    }

    #[test]
    fn canonical_names_round_trip() {
        for k in CnnOpKind::ALL {
            assert_eq!(CnnOpKind::from_name(k.name()), Some(k));
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        for k in RnnOpKind::ALL {
            assert_eq!(RnnOpKind::from_name(k.name()), Some(k));
        }
    }

    #[test]
    fn skip_connect_stride_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::uniform(&mut rng, &[2, 3, 4, 4], 1.0);
        let out = apply_cnn(CnnOpKind::SkipConnect, 1, input.clone());
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn none_is_zeros_at_both_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for stride in [1usize, 2] {
            let input = Tensor::uniform(&mut rng, &[1, 2, 5, 5], 1.0);
            let out = apply_cnn(CnnOpKind::None, stride, input);
            let expect = if stride == 1 { 5 } else { 3 };
            assert_eq!(out.shape(), &[1, 2, expect, expect]);
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn avg_pool_constant_input_edge_scaling() {
        // constant c: interior positions keep c, corners scale by 4/9
        let input = Tensor::filled(&[1, 1, 4, 4], 2.0);
        let out = apply_cnn(CnnOpKind::AvgPool3x3, 1, input);
        let d = out.data();
        assert!((d[5] - 2.0).abs() < 1e-6);
        assert!((d[0] - 2.0 * 4.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn every_cnn_op_obeys_the_shape_contract() {
        // stride 1 preserves [B,C,H,W]; stride 2 gives ceil halves
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(b, c, h, w) in &[(1usize, 2usize, 6usize, 6usize), (2, 4, 7, 5), (1, 3, 9, 8)] {
            for kind in CnnOpKind::ALL {
                for stride in [1usize, 2] {
                    let input = Tensor::uniform(&mut rng, &[b, c, h, w], 1.0);
                    let out = apply_cnn(kind, stride, input);
                    let want = if stride == 1 {
                        vec![b, c, h, w]
                    } else {
                        vec![b, c, h.div_ceil(2), w.div_ceil(2)]
                    };
                    assert_eq!(out.shape(), &want[..], "{} stride {stride}", kind.name());
                }
            }
        }
    }

    fn apply_rnn(kind: RnnOpKind, operands: Vec<Tensor>) -> Tensor {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hidden = operands[0].shape()[1];
        let params = create_rnn_op_params(kind, &mut store, &mut rng, hidden, "t");
        let mut bindings = Bindings::new();
        let ids: Vec<_> = operands
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let name = format!("op{i}");
                bindings.bind(&name, t.clone());
                name
            })
            .collect();
        let vids: Vec<_> = ids.iter().map(|n| tape.input(n)).collect();
        let y = rnn_op_apply(&mut tape, kind, &vids, &params).unwrap();
        tape.mark_output("y", y);
        forward(&tape, &store, &bindings).unwrap().output("y").unwrap()
    }

    #[test]
    fn elementwise_sum_matches_hand_values() {
        let a = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let out = apply_rnn(RnnOpKind::ElementwiseSum, vec![a, b]);
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn blend_saturates_to_first_operand() {
        // sigmoid(40) == 1 in 32-bit, so blend returns `a` exactly
        let z = Tensor::filled(&[1, 3], 40.0);
        let a = Tensor::from_vec(vec![1, 3], vec![0.5, -1.5, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 3], vec![9.0, 9.0, 9.0]).unwrap();
        let out = apply_rnn(RnnOpKind::Blend, vec![z, a.clone(), b]);
        for (o, e) in out.data().iter().zip(a.data()) {
            assert!((o - e).abs() < 1e-6);
        }
    }

    #[test]
    fn blend_mixes_by_sigmoid_gate() {
        // z = 0 gates both operands at exactly one half
        let z = Tensor::zeros(&[1, 2]);
        let a = Tensor::from_vec(vec![1, 2], vec![2.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let out = apply_rnn(RnnOpKind::Blend, vec![z, a, b]);
        assert!((out.data()[0] - 1.0).abs() < 1e-6);
        assert!((out.data()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn tanh_act_fixes_zero() {
        let x = Tensor::zeros(&[1, 1]);
        let out = apply_rnn(RnnOpKind::TanhAct, vec![x]);
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn rnn_ops_preserve_batch_by_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kind in RnnOpKind::ALL {
            let operands: Vec<_> = (0..kind.arity())
                .map(|_| Tensor::uniform(&mut rng, &[3, 5], 1.0))
                .collect();
            let out = apply_rnn(kind, operands);
            assert_eq!(out.shape(), &[3, 5], "{}", kind.name());
        }
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input("x");
        let err = rnn_op_apply(&mut tape, RnnOpKind::Blend, &[x], &RnnOpParams::default());
        assert!(err.is_err());
    }
}
