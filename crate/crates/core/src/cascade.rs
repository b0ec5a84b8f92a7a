//! The three stage networks, their multi-task heads and loss, and the
//! per-stage angle decisions.
//!
//! Every network ends in three heads branching from the last shared inner
//! product layer: face logits (2), box regression `(t_w, t_a, t_b)` (3) and
//! an orientation head whose shape depends on the stage: two logits
//! (up/down), three logits (-90/0/+90) or one linear output predicting the
//! residual angle divided by 45 degrees.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PcnError, Result};
use crate::geometry::{normalize_deg, RegressionTarget};
use crate::nn::model_io::{read_networks, write_networks};
use crate::nn::{
    init_weights, smooth_l1, softmax, softmax_cross_entropy, LayerSpec, NetSpec, Network,
    WeightInit,
};
use crate::tensor::Real;

/// Standard deviation of the Gaussian head-weight initialization. Trunk
/// layers are scaled by their fan-in.
pub const INIT_STD: f64 = 0.01;

pub const WEIGHT_INIT: WeightInit = WeightInit::FanIn { head_std: INIT_STD };

const FACE_LOGITS: usize = 2;
const BOX_OUTPUTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageId {
    One = 1,
    Two = 2,
    Three = 3,
}

impl StageId {
    pub const ALL: [StageId; 3] = [StageId::One, StageId::Two, StageId::Three];

    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(StageId::One),
            2 => Some(StageId::Two),
            3 => Some(StageId::Three),
            _ => None,
        }
    }

    /// Side length of the square input window.
    pub fn input_side(self) -> usize {
        match self {
            StageId::One | StageId::Two => 24,
            StageId::Three => 48,
        }
    }

    pub fn orient_outputs(self) -> usize {
        match self {
            StageId::One => 2,
            StageId::Two => 3,
            StageId::Three => 1,
        }
    }
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}", *self as u8)
    }
}

/// Default architecture of each stage. Small to large; valid convolutions.
pub fn stage_spec(stage: StageId) -> NetSpec {
    use LayerSpec::*;
    let trunk = match stage {
        // 24 -> 11 -> 9 -> 4 -> 2
        StageId::One => vec![
            Conv { out: 10, k: 3, s: 2 },
            Relu,
            Conv { out: 16, k: 3, s: 1 },
            Relu,
            MaxPool { k: 2, s: 2 },
            Conv { out: 24, k: 3, s: 1 },
            Relu,
            Fc { out: 96 },
            Relu,
        ],
        // 24 -> 22 -> 11 -> 9 -> 7 -> 3 -> 2
        StageId::Two => vec![
            Conv { out: 10, k: 3, s: 1 },
            Relu,
            MaxPool { k: 2, s: 2 },
            Conv { out: 16, k: 3, s: 1 },
            Relu,
            Conv { out: 24, k: 3, s: 1 },
            Relu,
            MaxPool { k: 2, s: 2 },
            Conv { out: 32, k: 2, s: 1 },
            Relu,
            Fc { out: 128 },
            Relu,
        ],
        // 48 -> 23 -> 11 -> 9 -> 4 -> 2 -> 1
        StageId::Three => vec![
            Conv { out: 24, k: 3, s: 2 },
            Relu,
            MaxPool { k: 2, s: 2 },
            Conv { out: 32, k: 3, s: 1 },
            Relu,
            MaxPool { k: 3, s: 2 },
            Conv { out: 48, k: 3, s: 1 },
            Relu,
            Conv { out: 64, k: 2, s: 1 },
            Relu,
            Fc { out: 192 },
            Relu,
        ],
    };
    NetSpec {
        in_channels: 3,
        in_side: stage.input_side(),
        trunk,
        heads: vec![FACE_LOGITS, BOX_OUTPUTS, stage.orient_outputs()],
    }
}

/// Builds a stage network with Gaussian-initialized weights.
pub fn build_pcn(stage: StageId, seed: u64) -> Network<f32> {
    build_pcn_with(&stage_spec(stage), seed)
}

pub fn build_pcn_with(spec: &NetSpec, seed: u64) -> Network<f32> {
    let mut net = Network::build(spec).expect("stage architecture is valid");
    init_weights(&mut net, WEIGHT_INIT, seed);
    net
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Orientation {
    /// Probability that the window faces up.
    Binary(f64),
    /// Scores for -90, 0 and +90 degrees; they sum to one.
    Ternary([f64; 3]),
    /// Predicted residual angle divided by 45, unclamped.
    Residual(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageOutput {
    /// Face probability.
    pub f: f64,
    pub t: RegressionTarget,
    pub orient: Orientation,
}

impl StageOutput {
    /// Decodes raw head outputs of the given stage.
    pub fn decode<T: Real>(stage: StageId, raw: &[T]) -> Result<Self> {
        let expect = FACE_LOGITS + BOX_OUTPUTS + stage.orient_outputs();
        if raw.len() != expect {
            return Err(PcnError::Shape(format!(
                "{stage} produces {expect} outputs, got {}",
                raw.len()
            )));
        }
        let raw: Vec<f64> = raw.iter().map(|v| v.to_f64c()).collect();
        let f = softmax(&raw[0..2])[1];
        let t = RegressionTarget {
            t_w: raw[2],
            t_a: raw[3],
            t_b: raw[4],
        };
        let orient = match stage {
            StageId::One => Orientation::Binary(softmax(&raw[5..7])[1]),
            StageId::Two => {
                let p = softmax(&raw[5..8]);
                Orientation::Ternary([p[0], p[1], p[2]])
            }
            StageId::Three => Orientation::Residual(raw[5]),
        };
        Ok(StageOutput { f, t, orient })
    }

    /// Coarse or fine angle predicted by this stage, in degrees.
    pub fn theta(&self) -> f64 {
        match self.orient {
            Orientation::Binary(g) => decide_theta1(g),
            Orientation::Ternary([g0, g1, g2]) => decide_theta2(g0, g1, g2),
            Orientation::Residual(v) => theta3_from_norm(v),
        }
    }
}

/// 0 when the window faces up (`g >= 0.5`), 180 otherwise.
pub fn decide_theta1(g: f64) -> f64 {
    if g >= 0.5 {
        0.0
    } else {
        180.0
    }
}

/// -90, 0 or +90 for the arg-max of the three scores; ties go to the lower
/// index.
pub fn decide_theta2(g0: f64, g1: f64, g2: f64) -> f64 {
    let mut id = 0;
    let mut best = g0;
    for (i, g) in [(1, g1), (2, g2)] {
        if g > best {
            best = g;
            id = i;
        }
    }
    [-90.0, 0.0, 90.0][id]
}

pub fn theta3_from_norm(v: f64) -> f64 {
    45.0 * v.clamp(-1.0, 1.0)
}

/// `theta1 + theta2 + theta3` normalized into `(-180, 180]`.
pub fn accumulate_rip(theta1: f64, theta2: f64, theta3: f64) -> f64 {
    normalize_deg(theta1 + theta2 + theta3)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_cal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_reg: 0.5,
            lambda_cal: 0.5,
        }
    }
}

/// IoU band of a training window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleBand {
    Positive,
    Negative,
    Suspected,
}

/// Stage-dependent calibration label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OrientLabel {
    /// `true` when facing up.
    Binary(bool),
    /// 0, 1, 2 for -90, 0, +90 degrees.
    Ternary(u8),
    /// Residual angle divided by 45.
    Residual(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLabels {
    pub band: SampleBand,
    pub reg: Option<RegressionTarget>,
    pub orient: Option<OrientLabel>,
}

impl StageLabels {
    pub fn negative() -> Self {
        StageLabels {
            band: SampleBand::Negative,
            reg: None,
            orient: None,
        }
    }
}

/// Per-task breakdown of a stage loss, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
    pub cal: f64,
}

/// Multi-task loss `L_cls + lambda_reg * L_reg + lambda_cal * L_cal` of one
/// sample and its gradient with respect to the raw head outputs.
///
/// Positives and negatives train classification; positives and suspected
/// windows train regression and calibration. A missing label contributes
/// neither loss nor gradient.
pub fn stage_loss<T: Real>(
    raw: &[T],
    labels: &StageLabels,
    stage: StageId,
    lw: &LossWeights,
) -> Result<(T, Vec<T>, LossParts)> {
    let n_orient = stage.orient_outputs();
    if raw.len() != FACE_LOGITS + BOX_OUTPUTS + n_orient {
        return Err(PcnError::Shape(format!(
            "{stage} loss expects {} outputs, got {}",
            FACE_LOGITS + BOX_OUTPUTS + n_orient,
            raw.len()
        )));
    }
    if labels.band == SampleBand::Negative && (labels.reg.is_some() || labels.orient.is_some()) {
        return Err(PcnError::Shape(
            "negative samples carry no regression or calibration label".into(),
        ));
    }
    let mut grad = vec![T::zero(); raw.len()];
    let mut parts = LossParts::default();
    let mut total = T::zero();

    let class = match labels.band {
        SampleBand::Positive => Some(1),
        SampleBand::Negative => Some(0),
        SampleBand::Suspected => None,
    };
    if let Some(y) = class {
        let (l, g) = softmax_cross_entropy(&raw[0..2], y);
        total += l;
        parts.cls = l.to_f64c();
        grad[0..2].copy_from_slice(&g);
    }

    if let Some(t) = labels.reg {
        let lam = T::from_f64c(lw.lambda_reg);
        let target: Vec<T> = t.to_array().iter().map(|&v| T::from_f64c(v)).collect();
        let (l, g) = smooth_l1(&raw[2..5], &target);
        total += lam * l;
        parts.reg = l.to_f64c();
        for (dst, gv) in grad[2..5].iter_mut().zip(g) {
            *dst = lam * gv;
        }
    }

    if let Some(label) = labels.orient {
        let lam = T::from_f64c(lw.lambda_cal);
        let head = &raw[5..5 + n_orient];
        let (l, g) = match (stage, label) {
            (StageId::One, OrientLabel::Binary(up)) => softmax_cross_entropy(head, up as usize),
            (StageId::Two, OrientLabel::Ternary(id)) if id < 3 => {
                softmax_cross_entropy(head, id as usize)
            }
            (StageId::Three, OrientLabel::Residual(v)) => smooth_l1(head, &[T::from_f64c(v)]),
            _ => {
                return Err(PcnError::Shape(format!(
                    "calibration label {label:?} does not fit {stage}"
                )))
            }
        };
        total += lam * l;
        parts.cal = l.to_f64c();
        for (dst, gv) in grad[5..].iter_mut().zip(g) {
            *dst = lam * gv;
        }
    }
    Ok((total, grad, parts))
}

/// The three trained stage networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Cascade {
    pub nets: [Network<f32>; 3],
}

impl Cascade {
    pub fn new(seed: u64) -> Self {
        Cascade {
            nets: StageId::ALL.map(|s| build_pcn(s, seed.wrapping_add(s as u64))),
        }
    }

    pub fn net(&self, stage: StageId) -> &Network<f32> {
        &self.nets[stage.index()]
    }

    pub fn net_mut(&mut self, stage: StageId) -> &mut Network<f32> {
        &mut self.nets[stage.index()]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let tagged: Vec<(u8, &Network<f32>)> = StageId::ALL
            .iter()
            .map(|&s| (s as u8, self.net(s)))
            .collect();
        write_networks(&mut buf, &tagged).expect("writing to memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_tagged(read_networks(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path)?;
        let tagged: Vec<(u8, &Network<f32>)> = StageId::ALL
            .iter()
            .map(|&s| (s as u8, self.net(s)))
            .collect();
        write_networks(BufWriter::new(f), &tagged)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)?;
        Self::from_tagged(read_networks(BufReader::new(f))?)
    }

    fn from_tagged(tagged: Vec<(u8, Network<f32>)>) -> Result<Self> {
        let mut slots: [Option<Network<f32>>; 3] = [None, None, None];
        for (tag, net) in tagged {
            let stage = StageId::from_tag(tag)
                .ok_or_else(|| PcnError::Format(format!("unknown stage tag {tag}")))?;
            let expect = FACE_LOGITS + BOX_OUTPUTS + stage.orient_outputs();
            if net.output_len() != expect || net.in_side != stage.input_side() {
                return Err(PcnError::Format(format!("{stage} network has the wrong shape")));
            }
            slots[stage.index()] = Some(net);
        }
        let [a, b, c] = slots;
        match (a, b, c) {
            (Some(a), Some(b), Some(c)) => Ok(Cascade { nets: [a, b, c] }),
            _ => Err(PcnError::Format("model file must hold all three stages".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn output_arity() {
        for (stage, n) in [(StageId::One, 7), (StageId::Two, 8), (StageId::Three, 6)] {
            let net = build_pcn(stage, 1);
            let x = Tensor::zeros(&[3, stage.input_side(), stage.input_side()]);
            assert_eq!(net.forward(&x).unwrap().len(), n);
        }
    }

    #[test]
    fn stages_grow() {
        let p1 = build_pcn(StageId::One, 0).param_count();
        let p2 = build_pcn(StageId::Two, 0).param_count();
        let p3 = build_pcn(StageId::Three, 0).param_count();
        assert!(p1 < p3);
        assert!(p2 < p3);
    }

    #[test]
    fn untrained_stage_one_is_undecided_on_zero_input() {
        let x = Tensor::zeros(&[3, 24, 24]);
        for seed in 0..100 {
            let net = build_pcn(StageId::One, seed);
            let out = StageOutput::decode(StageId::One, &net.forward(&x).unwrap()).unwrap();
            assert!((0.35..=0.65).contains(&out.f), "seed {seed}: f = {}", out.f);
        }
    }

    #[test]
    fn theta1_rule() {
        assert_eq!(decide_theta1(0.9), 0.0);
        assert_eq!(decide_theta1(0.1), 180.0);
        assert_eq!(decide_theta1(0.5), 0.0);
    }

    #[test]
    fn theta2_rule() {
        assert_eq!(decide_theta2(0.7, 0.2, 0.1), -90.0);
        assert_eq!(decide_theta2(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), -90.0);
        assert_eq!(decide_theta2(0.1, 0.2, 0.7), 90.0);
        assert_eq!(decide_theta2(0.2, 0.6, 0.2), 0.0);
        assert_eq!(decide_theta2(0.1, 0.45, 0.45), 0.0);
    }

    #[test]
    fn rip_accumulation() {
        assert_eq!(accumulate_rip(0.0, 0.0, 0.0), 0.0);
        assert_eq!(accumulate_rip(180.0, 90.0, 20.0), -70.0);
        assert_eq!(accumulate_rip(180.0, -90.0, -10.0), 80.0);
        assert_eq!(accumulate_rip(180.0, 0.0, 0.0), 180.0);
        assert_eq!(accumulate_rip(180.0, 90.0, -90.0), 180.0);
    }

    #[test]
    fn theta3_clamps() {
        assert_eq!(theta3_from_norm(2.0), 45.0);
        assert_eq!(theta3_from_norm(-3.0), -45.0);
        assert_eq!(theta3_from_norm(0.5), 22.5);
    }

    #[test]
    fn ternary_scores_sum_to_one() {
        let raw = [0.0f32, 1.0, 1.0, 0.0, 0.0, 3.0, -2.0, 0.5];
        let out = StageOutput::decode(StageId::Two, &raw).unwrap();
        let Orientation::Ternary(g) = out.orient else {
            panic!("stage two decodes ternary scores")
        };
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(out.theta(), -90.0);
        assert!(StageOutput::decode(StageId::Two, &raw[..7]).is_err());
    }

    fn positive_labels(stage: StageId) -> StageLabels {
        let orient = match stage {
            StageId::One => OrientLabel::Binary(true),
            StageId::Two => OrientLabel::Ternary(2),
            StageId::Three => OrientLabel::Residual(0.3),
        };
        StageLabels {
            band: SampleBand::Positive,
            reg: Some(RegressionTarget {
                t_w: 1.1,
                t_a: -0.05,
                t_b: 0.02,
            }),
            orient: Some(orient),
        }
    }

    #[test]
    fn perfect_positive_has_small_loss() {
        let lw = LossWeights::default();
        let raw1 = [-20.0f64, 20.0, 1.1, -0.05, 0.02, -20.0, 20.0];
        let (l, _, _) = stage_loss(&raw1, &positive_labels(StageId::One), StageId::One, &lw).unwrap();
        assert!(l < 1e-3);
        let raw3 = [-20.0f64, 20.0, 1.1, -0.05, 0.02, 0.3];
        let (l, _, _) =
            stage_loss(&raw3, &positive_labels(StageId::Three), StageId::Three, &lw).unwrap();
        assert!(l < 1e-3);
    }

    #[test]
    fn zero_weights_leave_classification_only() {
        let raw = [0.3f64, -0.4, 0.7, 0.1, 0.2, 0.9, -0.2];
        let lw = LossWeights {
            lambda_reg: 0.0,
            lambda_cal: 0.0,
        };
        let (l, g, _) = stage_loss(&raw, &positive_labels(StageId::One), StageId::One, &lw).unwrap();
        let f = softmax(&raw[0..2])[1];
        assert!((l + f.ln()).abs() < 1e-12);
        assert!(g[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn suspected_samples_skip_classification() {
        let raw = [0.3f64, -0.4, 0.7, 0.1, 0.2, 0.9, -0.2, 0.1];
        let mut labels = positive_labels(StageId::Two);
        labels.band = SampleBand::Suspected;
        let (_, g, parts) = stage_loss(&raw, &labels, StageId::Two, &LossWeights::default()).unwrap();
        assert_eq!(&g[0..2], &[0.0, 0.0]);
        assert_eq!(parts.cls, 0.0);
        assert!(parts.reg > 0.0 && parts.cal > 0.0);
    }

    #[test]
    fn negative_samples_reject_extra_labels() {
        let raw = [0.0f64; 7];
        let mut labels = StageLabels::negative();
        let lw = LossWeights::default();
        let (_, g, _) = stage_loss(&raw, &labels, StageId::One, &lw).unwrap();
        assert!(g[2..].iter().all(|&v| v == 0.0));
        labels.orient = Some(OrientLabel::Binary(true));
        assert!(stage_loss(&raw, &labels, StageId::One, &lw).is_err());
    }

    #[test]
    fn mismatched_calibration_label_is_rejected() {
        let raw = [0.0f64; 7];
        let mut labels = positive_labels(StageId::One);
        labels.orient = Some(OrientLabel::Ternary(1));
        assert!(stage_loss(&raw, &labels, StageId::One, &LossWeights::default()).is_err());
    }

    #[test]
    fn cascade_bytes_roundtrip() {
        let c = Cascade::new(5);
        let bytes = c.to_bytes();
        assert_eq!(Cascade::from_bytes(&bytes).unwrap(), c);
    }
}
