//! Reference contextual encoder, classifier head, trainer and the
//! embedding archive for externally produced vectors.

pub mod archive;
pub mod checkpoint;
pub mod head;
pub mod model;
pub mod pack;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use archive::{ArchiveRecord, EmbeddingArchive};
pub use head::{Activation, ClassifierHead};
pub use model::{Encoder, EncoderConfig, SequenceEncoding};
pub use pack::{pack_nsp_input, pack_ppred_input, pack_sequence, PackedInput, TokenSource};
pub use train::{classify, gradient_check, train, Hyperparameters, TrainReport, TrainingExample};
pub use vocab::{build_vocabulary, Vocabulary};
