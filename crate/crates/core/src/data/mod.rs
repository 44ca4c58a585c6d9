//! Synthetic shapes corpus, nested growth-step manifests and batching.
//!
//! Every pair is a pure function of `(corpus seed, pair id)`, so nothing but
//! the schedule is ever written to disk.

mod render;
mod schedule;
mod text;

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use render::{color_index, shape_index, Color, PairSpec, Position, Shape, BACKGROUND, NOISE_STD};
pub use schedule::{build_schedule, GrowthSchedule, Manifest, SCHEDULE_FORMAT_VERSION};
pub use text::{class_prompts, fill_caption, Vocabulary, CAPTION_TEMPLATES, PROMPT_TEMPLATES, SIZE_WORDS};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 16;

/// `"{color} {shape}"` for label `shape * 4 + color`.
pub fn class_name(label: usize) -> String {
    format!("{} {}", Color::ALL[label % 4].name(), Shape::ALL[label / 4].name())
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One rendered pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[3, S, S]` pixels mapped from `[0, 1]` to `2v − 1`.
    pub image: Vec<f32>,
    pub tokens: Vec<usize>,
    pub caption: String,
    pub label: usize,
}

pub fn generate_pair(spec: &PairSpec, image_size: usize, vocab: &Vocabulary) -> Result<Example> {
    let image = spec.render(image_size).into_iter().map(|v| 2.0 * v - 1.0).collect();
    let template = CAPTION_TEMPLATES[spec.template % CAPTION_TEMPLATES.len()];
    let caption = fill_caption(template, spec.color, spec.shape, spec.size_word(), spec.position);
    let tokens = vocab.encode(&caption)?;
    Ok(Example { image, tokens, caption, label: spec.label() })
}

/// The infinite seeded corpus. Ids are grouped in blocks of 16 and each block
/// holds every class exactly once, in a seeded order.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub seed: u64,
    pub image_size: usize,
    vocab: Vocabulary,
}

impl Corpus {
    pub fn new(seed: u64, image_size: usize) -> Self {
        Corpus { seed, image_size, vocab: Vocabulary::new() }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn pair_spec(&self, pair_id: u64) -> PairSpec {
        let block = pair_id / NUM_CLASSES as u64;
        let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, block)));
        let label = order[(pair_id % NUM_CLASSES as u64) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ 0x5bd1_e995, pair_id));
        PairSpec {
            pair_id,
            shape: Shape::ALL[label / 4],
            color: Color::ALL[label % 4],
            position: Position::ALL[rng.random_range(0..Position::ALL.len())],
            scale_seed: rng.random(),
            noise_seed: rng.random(),
            template: rng.random_range(0..CAPTION_TEMPLATES.len()),
        }
    }

    pub fn example(&self, pair_id: u64) -> Result<Example> {
        generate_pair(&self.pair_spec(pair_id), self.image_size, &self.vocab)
    }

    /// Renders `ids` into one batch, in order.
    pub fn batch(&self, ids: &[u64]) -> Result<Batch> {
        let s = self.image_size;
        let mut pixels = Vec::with_capacity(ids.len() * 3 * s * s);
        let mut seqs = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for &id in ids {
            let ex = self.example(id)?;
            pixels.extend(ex.image);
            seqs.push(ex.tokens);
            labels.push(ex.label);
        }
        Ok(Batch {
            ids: ids.to_vec(),
            images: Tensor::new(vec![ids.len(), 3, s, s], pixels)?,
            tokens: TokenBatch::from_sequences(&seqs),
            labels,
        })
    }

    /// A held-out split, e.g. [`GrowthSchedule::selection_ids`].
    pub fn eval_set(&self, ids: Range<u64>) -> Result<Batch> {
        if ids.is_empty() {
            return Err(Error::Input("evaluation split is empty".into()));
        }
        self.batch(&ids.collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<u64>,
    pub images: Tensor<f32>,
    pub tokens: TokenBatch,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One epoch over a manifest in a seeded order; the ragged tail is dropped.
pub struct BatchStream<'c> {
    corpus: &'c Corpus,
    order: Vec<u64>,
    batch_size: usize,
    pos: usize,
}

/// The shuffle depends only on the manifest hash and `epoch_seed`.
pub fn batch_stream<'c>(
    corpus: &'c Corpus,
    manifest: &Manifest,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<BatchStream<'c>> {
    if batch_size == 0 || batch_size > manifest.ids.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} must lie in 1..={}",
            manifest.ids.len()
        )));
    }
    let hash_seed = u64::from_str_radix(&manifest.hash[..16], 16)
        .map_err(|_| Error::Input(format!("malformed manifest hash `{}`", manifest.hash)))?;
    let mut order = manifest.ids.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(hash_seed, epoch_seed)));
    Ok(BatchStream { corpus, order, batch_size, pos: 0 })
}

impl BatchStream<'_> {
    /// Number of full batches in the epoch.
    pub fn batches(&self) -> usize {
        self.order.len() / self.batch_size
    }

    /// Ids of every batch, without rendering.
    pub fn id_batches(&self) -> impl Iterator<Item = &[u64]> {
        self.order.chunks_exact(self.batch_size)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let end = self.pos + self.batch_size;
        if end > self.order.len() {
            return None;
        }
        let ids = &self.order[self.pos..end];
        self.pos = end;
        Some(self.corpus.batch(ids))
    }
}
