//! The detector: micro-backbone, FPN, RPN, ROI-Align heads, multitask loss
//! and inference.

pub mod backbone;
pub mod fpn;
pub mod heads;
pub mod layers;
pub mod loss;
pub mod model;
pub mod roi;
pub mod rpn;

pub use backbone::{Backbone, STAGE_STRIDES};
pub use fpn::{Fpn, PyramidFeatures};
pub use heads::{BoxHead, MaskHead};
pub use loss::{multitask_loss, HeadOutputs, LossBreakdown, LossVars};
pub use model::{spot_check_gradients, DetectConfig, Detection, Features, MaskRcnn, ModelConfig, SpotCheck, TrainTargetConfig, TrainingTargets};
pub use roi::{assign_roi_level, route_rois, sample_rois, DetectionTargets, RoiSampleConfig, SampledRoi};
pub use rpn::{
    assign_rpn_targets, generate_proposals, label_anchors, sample_labels, Proposal, ProposalConfig, RpnHead, RpnOutputs,
    RpnTargetConfig, RpnTargets,
};
