//! A small multi-stage convolutional segmenter with a head after every stage,
//! hand-written backward passes and the two-phase training pipeline.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod net;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, network_from_bytes, save_checkpoint};
pub use gradcheck::{check_gradients, grad_check, GradCheckConfig, GradCheckReport};
pub use loss::{cross_entropy_remapped, hierarchical_loss, HierarchicalLoss, LossTerm};
pub use net::{Activation, ForwardTrace, Network, NetworkConfig, StageOutputs};
pub use optim::Sgd;
pub use params::{Grads, Param, ParamStore};
pub use pipeline::{analysis_confusions, two_phase_pipeline, Clustering, PipelineConfig, PipelineOutput};
pub use tensor::Tensor;
pub use train::{argmax_labels, evaluate, head_confusions, train, train_network, EpochRecord, History, TrainConfig};
