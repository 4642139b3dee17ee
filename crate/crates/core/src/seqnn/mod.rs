//! Embeddings, GRU stacks, the bidirectional encoder and the decoder with
//! teacher forcing, word dropout, greedy and beam search.

mod decoder;
mod encoder;
mod layers;
mod search;

pub use decoder::{log_softmax, DecoderNet, DecoderState, GruStepper, TeacherForced};
pub use encoder::{encode_bidirectional, BiEncoder, NUM_LAYERS};
pub use layers::{Affine, EmbeddingTable, GruLayer, GruStack};
pub use search::{decode_beam, decode_greedy, Hypothesis, StepDecoder};
