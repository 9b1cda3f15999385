//! Checkpoints: a single JSON header line describing every tensor (name,
//! shape, byte offset into the blob), followed by raw little-endian f32
//! data. Round trips are bit-exact, so training resumed from a checkpoint
//! is indistinguishable from an uninterrupted run.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossReport;
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;
use crate::tensor::Matrix;
use crate::text::Vocabulary;

const FORMAT: &str = "relvit-checkpoint-v1";

/// Everything the training loop owns between steps. Restoring this resumes
/// the exact trajectory: parameters, optimizer moments, and the data RNG.
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub last_loss: Option<LossReport>,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("step", &self.step)
            .field("params", &self.model.store.num_scalars())
            .field("last_loss", &self.last_loss)
            .finish_non_exhaustive()
    }
}

impl TrainState {
    pub fn fresh(config: ModelConfig, seed: u64) -> Result<TrainState> {
        let model = Model::new(config, seed)?;
        let adam = Adam::new(&model.store);
        Ok(TrainState {
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed),
            model,
            step: 0,
            last_loss: None,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset into the blob that follows the header line.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    step: usize,
    config: ModelConfig,
    vocab: Vec<String>,
    rng_seed: String,
    rng_word_pos: String,
    adam_t: usize,
    last_loss: Option<LossReport>,
    tensors: Vec<TensorEntry>,
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn from_hex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(Error::Data(format!("invalid hex string {s:?}")));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::Data(format!("invalid hex byte: {e}")))
        })
        .collect()
}

/// Tensor order in the blob: every parameter, then the first Adam moment of
/// every parameter, then the second, all in registration order.
fn tensor_sequence(state: &TrainState) -> Vec<(String, &Matrix)> {
    let store = &state.model.store;
    let mut seq = Vec::new();
    for id in store.ids() {
        seq.push((format!("param/{}", store.name(id)), store.value(id)));
    }
    for id in store.ids() {
        seq.push((format!("adam.m/{}", store.name(id)), state.adam.moments(id.index()).0));
    }
    for id in store.ids() {
        seq.push((format!("adam.v/{}", store.name(id)), state.adam.moments(id.index()).1));
    }
    seq
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let seq = tensor_sequence(state);
    let mut tensors = Vec::with_capacity(seq.len());
    let mut offset = 0usize;
    for (name, matrix) in &seq {
        tensors.push(TensorEntry {
            name: name.clone(),
            rows: matrix.rows(),
            cols: matrix.cols(),
            offset,
        });
        offset += matrix.len() * 4;
    }
    let header = Header {
        format: FORMAT.into(),
        step: state.step,
        config: state.model.config,
        vocab: state.model.vocab.tokens().to_vec(),
        rng_seed: to_hex(&state.rng.get_seed()),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        adam_t: state.adam.step_count(),
        last_loss: state.last_loss,
        tensors,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let line = serde_json::to_string(&header)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    for (_, matrix) in &seq {
        for v in matrix.data() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&line)
        .map_err(|e| Error::parse(format!("{}:1", path.display()), e.to_string()))?;
    if header.format != FORMAT {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint format {:?}",
            path.display(),
            header.format
        )));
    }

    let vocab = Vocabulary::from_tokens(header.vocab.clone())?;
    let mut model = Model::with_vocab(header.config, vocab, 0)?;

    let mut blob = Vec::new();
    reader.read_to_end(&mut blob).map_err(|e| Error::io(path, e))?;

    // The header must describe exactly the tensors this model owns, in
    // blob order.
    let expected: Vec<String> = {
        let store = &model.store;
        let names: Vec<&str> = store.ids().map(|id| store.name(id)).collect();
        ["param", "adam.m", "adam.v"]
            .iter()
            .flat_map(|prefix| names.iter().map(move |n| format!("{prefix}/{n}")))
            .collect()
    };
    if header.tensors.len() != expected.len() {
        return Err(Error::Data(format!(
            "{}: checkpoint lists {} tensors, model has {}",
            path.display(),
            header.tensors.len(),
            expected.len()
        )));
    }

    let read_tensor = |entry: &TensorEntry, want: &str| -> Result<Matrix> {
        if entry.name != want {
            return Err(Error::Data(format!(
                "{}: tensor {:?} where {want:?} was expected",
                path.display(),
                entry.name
            )));
        }
        let bytes = entry.rows * entry.cols * 4;
        let end = entry.offset.checked_add(bytes).filter(|&e| e <= blob.len());
        let Some(end) = end else {
            return Err(Error::Data(format!(
                "{}: blob truncated at offset {} while reading {:?} ({} bytes needed, {} present)",
                path.display(),
                entry.offset,
                entry.name,
                bytes,
                blob.len()
            )));
        };
        let data = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Matrix::from_vec(entry.rows, entry.cols, data)
    };

    let n = model.store.len();
    let mut params = Vec::with_capacity(n);
    let mut adam_m = Vec::with_capacity(n);
    let mut adam_v = Vec::with_capacity(n);
    for (i, entry) in header.tensors.iter().enumerate() {
        let matrix = read_tensor(entry, &expected[i])?;
        match i / n {
            0 => params.push(matrix),
            1 => adam_m.push(matrix),
            _ => adam_v.push(matrix),
        }
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, value) in ids.into_iter().zip(params) {
        model.store.set_value(id, value)?;
    }
    let mut adam = Adam::new(&model.store);
    adam.restore(header.adam_t, adam_m, adam_v)?;

    let seed = from_hex(&header.rng_seed)?;
    let seed: [u8; 32] = seed
        .try_into()
        .map_err(|_| Error::Data(format!("{}: RNG seed must be 32 bytes", path.display())))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    let word_pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|e| Error::Data(format!("{}: bad RNG position: {e}", path.display())))?;
    rng.set_word_pos(word_pos);

    Ok(TrainState { model, adam, rng, step: header.step, last_loss: header.last_loss })
}
