//! The full detector: features, template, matching, heads and decoding, with
//! a hand-written backward pass through all of it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    project_and_upsample, upsampled_dims, BackboneConfig, BackboneMode, BackboneTape, FeatureMap,
    TinyBackbone,
};
use crate::boxes::BoxXYWH;
use crate::error::{arg_err, config_err, Result};
use crate::head::{
    decode_backward, decode_boxes, BoxMap, DecodeVariant, HeadParams, HeadTape, PresenceMap,
    RegressionMap,
};
use crate::loss::{
    box_loss, box_loss_signature, extended_center_set, presence_loss_logits, presence_signature,
    total_loss, LossReduction, TargetMaps, DEFAULT_DELTA,
};
use crate::matching::{apply_scale, build_head_input, match_raw, match_raw_backward, MatchVariant};
use crate::numerics::{
    bilinear_resize_backward, linear_backward, sigmoid, Grid3, LayerParams, Probe, Real,
    SignatureHasher, DEFAULT_LEAKY_SLOPE,
};
use crate::template::{roi_align_extract, template_backward, Template};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Hidden channels of both heads; `None` uses the head input width.
    pub head_hidden: Option<usize>,
    pub match_variant: MatchVariant,
    pub decode_variant: DecodeVariant,
    pub leaky_slope: f64,
    /// Let gradients flow from the template back into the feature map.
    pub template_grad: bool,
    /// Keep the tiny backbone fixed during training.
    pub freeze_backbone: bool,
    pub delta: f64,
    pub loss_reduction: LossReduction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small trainable configuration for CPU experiments.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig {
                mode: BackboneMode::Tiny {
                    widths: vec![16, 32, 64],
                },
                projection_out: 32,
                upsample_to: None,
                input_channels: 3,
            },
            head_hidden: Some(64),
            match_variant: MatchVariant::Tm,
            decode_variant: DecodeVariant::Full,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            template_grad: true,
            freeze_backbone: false,
            delta: DEFAULT_DELTA,
            loss_reduction: LossReduction::Mean,
        }
    }

    /// Full-size head on precomputed 256-channel features projected to 512
    /// and upsampled to 128 cells.
    pub fn full_scale() -> Self {
        Self {
            backbone: BackboneConfig {
                mode: BackboneMode::Precomputed { native_depth: 256 },
                projection_out: 512,
                upsample_to: Some(128),
                input_channels: 3,
            },
            head_hidden: None,
            ..Self::desk()
        }
    }

    pub fn head_input_depth(&self) -> usize {
        self.match_variant
            .head_input_depth(self.backbone.projection_out)
    }

    pub fn head_hidden_width(&self) -> usize {
        self.head_hidden.unwrap_or_else(|| self.head_input_depth())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head_hidden == Some(0) {
            return config_err("head_hidden must be positive");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return config_err(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            ));
        }
        if !(self.delta > 0.0 && self.delta <= 0.5) {
            return config_err(format!("delta must lie in (0, 0.5], got {}", self.delta));
        }
        Ok(())
    }
}

/// Input to the model: an RGB image for the tiny backbone, or native
/// (unprojected) features for the precomputed mode.
#[derive(Clone, Debug)]
pub enum ModelInput<T> {
    Image(Grid3<T>),
    Features(FeatureMap<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TmrModel<T> {
    pub config: ModelConfig,
    pub backbone: Option<TinyBackbone<T>>,
    pub projection: LayerParams<T>,
    pub tm_scale: LayerParams<T>,
    pub regressor: HeadParams<T>,
    pub classifier: HeadParams<T>,
}

/// Activations of the feature stage kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FeatureTape<T> {
    pub backbone: Option<BackboneTape<T>>,
    pub native: FeatureMap<T>,
}

/// Everything computed after the feature map for one exemplar.
#[derive(Clone, Debug)]
pub struct HeadForward<T> {
    pub template: Template<T>,
    pub matched_raw: Option<Grid3<T>>,
    pub head_input: Grid3<T>,
    pub reg_tape: HeadTape<T>,
    pub regression: RegressionMap<T>,
    pub cls_tape: HeadTape<T>,
    pub logits: Grid3<T>,
    pub boxes: BoxMap,
}

impl<T: Real> HeadForward<T> {
    pub fn presence(&self) -> PresenceMap<T> {
        PresenceMap {
            grid: sigmoid(&self.logits),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub presence: f64,
    pub boxes: f64,
    pub total: f64,
    pub positives: usize,
}

impl<T: Real> TmrModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = T::lit(config.leaky_slope);
        let backbone = match &config.backbone.mode {
            BackboneMode::Tiny { widths } => Some(TinyBackbone::new(
                config.backbone.input_channels,
                widths,
                slope,
                &mut rng,
            )),
            BackboneMode::Precomputed { .. } => None,
        };
        let mut projection = LayerParams::linear(
            "projection",
            config.backbone.native_depth(),
            config.backbone.projection_out,
        );
        projection.init_he(&mut rng, 1.0);
        let tm_scale = LayerParams::scalar("tm_scale", T::one());
        let c_in = config.head_input_depth();
        let hidden = config.head_hidden_width();
        let regressor = HeadParams::new("regressor", c_in, hidden, 4, &mut rng);
        let classifier = HeadParams::new("classifier", c_in, hidden, 1, &mut rng);
        Ok(Self {
            config,
            backbone,
            projection,
            tm_scale,
            regressor,
            classifier,
        })
    }

    /// All parameter groups in a fixed order.
    pub fn params(&self) -> Vec<&LayerParams<T>> {
        let mut v: Vec<&LayerParams<T>> = Vec::new();
        if let Some(bb) = &self.backbone {
            v.extend(bb.layers.iter());
        }
        v.extend([
            &self.projection,
            &self.tm_scale,
            &self.regressor.conv,
            &self.regressor.linear,
            &self.classifier.conv,
            &self.classifier.linear,
        ]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        let mut v: Vec<&mut LayerParams<T>> = Vec::new();
        if let Some(bb) = &mut self.backbone {
            v.extend(bb.layers.iter_mut());
        }
        v.extend([
            &mut self.projection,
            &mut self.tm_scale,
            &mut self.regressor.conv,
            &mut self.regressor.linear,
            &mut self.classifier.conv,
            &mut self.classifier.linear,
        ]);
        v
    }

    /// Parameters updated by training (the backbone is left out when frozen).
    pub fn trainable_params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        let frozen = self.config.freeze_backbone;
        let n_bb = self.backbone.as_ref().map_or(0, |b| b.layers.len());
        self.params_mut()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !frozen || *i >= n_bb)
            .map(|(_, p)| p)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.param_count()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn cast<U: Real>(&self) -> TmrModel<U> {
        TmrModel {
            config: self.config.clone(),
            backbone: self.backbone.as_ref().map(|bb| TinyBackbone {
                layers: bb.layers.iter().map(|l| l.cast()).collect(),
                slope: U::lit(bb.slope.to_f64_lossy()),
            }),
            projection: self.projection.cast(),
            tm_scale: self.tm_scale.cast(),
            regressor: HeadParams {
                conv: self.regressor.conv.cast(),
                linear: self.regressor.linear.cast(),
            },
            classifier: HeadParams {
                conv: self.classifier.conv.cast(),
                linear: self.classifier.linear.cast(),
            },
        }
    }

    fn slope(&self) -> T {
        T::lit(self.config.leaky_slope)
    }

    /// Native features (before projection) and the backbone tape.
    pub fn native_features(&self, input: &ModelInput<T>) -> Result<FeatureTape<T>> {
        match (input, &self.backbone) {
            (ModelInput::Image(img), Some(bb)) => {
                if img.depth() != self.config.backbone.input_channels {
                    return config_err(format!(
                        "image has {} channels, backbone expects {}",
                        img.depth(),
                        self.config.backbone.input_channels
                    ));
                }
                let (native, tape) = bb.forward(img)?;
                Ok(FeatureTape {
                    backbone: Some(tape),
                    native,
                })
            }
            (ModelInput::Features(fm), _) => Ok(FeatureTape {
                backbone: None,
                native: fm.clone(),
            }),
            (ModelInput::Image(_), None) => {
                arg_err("this model reads precomputed features; an image was given")
            }
        }
    }

    /// Projected (and upsampled) features from native ones.
    pub fn project(&self, native: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        project_and_upsample(native, &self.config.backbone, &self.projection)
    }

    /// Projected feature map at the configured resolution.
    pub fn features(&self, input: &ModelInput<T>) -> Result<FeatureMap<T>> {
        self.project(&self.native_features(input)?.native)
    }

    /// Template, matching, heads and decoding on a projected feature map.
    pub fn head_forward(&self, fm: &FeatureMap<T>, exemplar: &BoxXYWH) -> Result<HeadForward<T>> {
        let variant = self.config.match_variant;
        let template = roi_align_extract(fm, exemplar)?;
        let matched_raw = match_raw(variant, &fm.grid, &template.grid)?;
        let scaled = matched_raw
            .as_ref()
            .map(|m| apply_scale(m.clone(), self.tm_scale.weight[0]));
        let head_input = build_head_input(&fm.grid, scaled.as_ref(), variant)?;
        let (reg_grid, reg_tape) = self.regressor.forward(&head_input, self.slope())?;
        let (logits, cls_tape) = self.classifier.forward(&head_input, self.slope())?;
        let regression = RegressionMap { grid: reg_grid };
        let boxes = decode_boxes(&regression, exemplar, fm.stride, self.config.decode_variant)?;
        Ok(HeadForward {
            template,
            matched_raw,
            head_input,
            reg_tape,
            regression,
            cls_tape,
            logits,
            boxes,
        })
    }

    /// Training targets for a feature map of the given shape.
    pub fn targets(&self, fm: &FeatureMap<T>, gt: &[BoxXYWH]) -> Result<TargetMaps> {
        extended_center_set(gt, fm.stride, fm.height(), fm.width(), self.config.delta)
    }

    /// Forward, loss and backward for one (input, exemplar, ground truth)
    /// triple. Parameter gradients are accumulated, scaled by `weight`.
    pub fn accumulate_gradients(
        &mut self,
        input: &ModelInput<T>,
        exemplar: &BoxXYWH,
        gt: &[BoxXYWH],
        weight: f64,
    ) -> Result<LossBreakdown> {
        let feat = self.native_features(input)?;
        let fm = self.project(&feat.native)?;
        let fwd = self.head_forward(&fm, exemplar)?;
        let targets = self.targets(&fm, gt)?;
        let reduction = self.config.loss_reduction;
        let (lp, d_logits) = presence_loss_logits(&fwd.logits, &targets, reduction)?;
        let (lb, d_boxes) = box_loss(&fwd.boxes, &targets, reduction)?;
        let total = total_loss(lp, lb)?;
        let d_reg: Grid3<T> = decode_backward(
            &fwd.boxes,
            &d_boxes,
            exemplar,
            fm.stride,
            self.config.decode_variant,
        )?;
        let w = T::lit(weight);
        let d_logits = d_logits.map(|v| v * w);
        let d_reg = d_reg.map(|v| v * w);
        self.backward(&feat, &fm, &fwd, &d_reg, &d_logits)?;
        Ok(LossBreakdown {
            presence: lp,
            boxes: lb,
            total,
            positives: targets.positives(),
        })
    }

    /// Backpropagates head-output gradients into every parameter group.
    pub fn backward(
        &mut self,
        feat: &FeatureTape<T>,
        fm: &FeatureMap<T>,
        fwd: &HeadForward<T>,
        d_reg: &Grid3<T>,
        d_logits: &Grid3<T>,
    ) -> Result<()> {
        let slope = self.slope();
        let variant = self.config.match_variant;
        let mut d_in = self
            .regressor
            .backward(&fwd.head_input, &fwd.reg_tape, d_reg, slope)?;
        d_in.add_assign(&self.classifier.backward(
            &fwd.head_input,
            &fwd.cls_tape,
            d_logits,
            slope,
        )?)?;

        let (d_match, mut d_f) = match variant {
            MatchVariant::None => (None, d_in),
            MatchVariant::TmOnly => (
                Some(d_in),
                Grid3::zeros(fm.height(), fm.width(), fm.depth()),
            ),
            v => {
                let (m, f) = d_in.split_depth(v.match_depth(fm.depth()))?;
                (Some(m), f)
            }
        };
        if let (Some(d_match), Some(raw)) = (d_match, fwd.matched_raw.as_ref()) {
            let s = self.tm_scale.weight[0];
            let d_s: T = d_match
                .values()
                .iter()
                .zip(raw.values())
                .map(|(&g, &r)| g * r)
                .sum();
            self.tm_scale.grad_weight[0] += d_s;
            let d_raw = d_match.map(|g| g * s);
            let (d_f_match, d_t) =
                match_raw_backward(variant, &fm.grid, &fwd.template.grid, &d_raw)?;
            d_f.add_assign(&d_f_match)?;
            if self.config.template_grad {
                d_f.add_assign(&template_backward(&fwd.template, &d_t, fm.grid.dims())?)?;
            }
        }

        // undo the upsampling, then the projection
        let native = &feat.native;
        let d_proj = if (fm.height(), fm.width()) == (native.height(), native.width()) {
            d_f
        } else {
            bilinear_resize_backward((native.height(), native.width(), fm.depth()), &d_f)?
        };
        let d_native = linear_backward(&native.grid, &mut self.projection, &d_proj)?;
        if let (Some(bb), Some(tape)) = (self.backbone.as_mut(), feat.backbone.as_ref()) {
            if !self.config.freeze_backbone {
                bb.backward(tape, &d_native)?;
            }
        }
        Ok(())
    }

    /// Loss value and branch signature for finite-difference checks.
    pub fn loss_probe(
        &self,
        input: &ModelInput<T>,
        exemplar: &BoxXYWH,
        gt: &[BoxXYWH],
    ) -> Result<Probe> {
        let feat = self.native_features(input)?;
        let fm = self.project(&feat.native)?;
        let fwd = self.head_forward(&fm, exemplar)?;
        let targets = self.targets(&fm, gt)?;
        let reduction = self.config.loss_reduction;
        let (lp, _) = presence_loss_logits(&fwd.logits, &targets, reduction)?;
        let (lb, _) = box_loss(&fwd.boxes, &targets, reduction)?;
        let mut sig = SignatureHasher::new();
        if let Some(tape) = &feat.backbone {
            for z in &tape.preacts {
                z.values().iter().for_each(|v| sig.push(*v > T::zero()));
            }
        }
        for z in [&fwd.reg_tape.preact, &fwd.cls_tape.preact] {
            z.values().iter().for_each(|v| sig.push(*v > T::zero()));
        }
        presence_signature(&fwd.logits, &mut sig);
        box_loss_signature(&fwd.boxes, &targets, &mut sig);
        Ok(Probe {
            value: total_loss(lp, lb)?,
            signature: sig.finish(),
        })
    }

    /// Feature-map dims `(h, w)` the heads see for a native `h x w` map.
    pub fn head_dims(&self, native_h: usize, native_w: usize) -> (usize, usize) {
        upsampled_dims(native_h, native_w, self.config.backbone.upsample_to)
    }
}
