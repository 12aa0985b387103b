//! Vocabularies, corpora, padded batches and the synthetic tasks.

mod batch;
mod corpus;
mod synthetic;
mod vocab;

pub use batch::{make_batches, Pair, ParallelBatch};
pub use corpus::{encode_pairs, load_parallel_tsv, parse_parallel_tsv, read_text, LmCorpus, BUILTIN_CORPUS};
pub use synthetic::{
    cipher_permutation, gen_cipher_task, gen_copy_task, gen_reverse_task, gen_task, invert_permutation, TaskKind,
};
pub use vocab::{Tokenization, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
