//! Symmetric contrastive loss and the zero-shot / retrieval evaluation metrics.

use crate::error::{Error, Result};
use crate::model::{embed_images, embed_texts, ForwardOptions, ModelView, TokenBatch};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Symmetric image-text contrastive loss of a square similarity matrix whose
/// diagonal holds the positive pairs.
///
/// Each row term is `-(1/n) log softmax(s_i·)_i`, each column term the same over
/// `s_·i`, and the total is half their sum over the batch. The `1/n` factor is
/// applied per sample, so the total scales like `ln n` for an uninformative `s`.
pub fn contrastive_loss<T: Real>(g: &mut Graph<T>, s: Var) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::shape("contrastive_loss", format!("needs a non-empty square matrix, got {shape:?}")));
    }
    let n = shape[0];
    let eye = g.constant(Tensor::eye(n));
    let rows = g.log_softmax(s)?;
    let st = g.transpose(s)?;
    let cols = g.log_softmax(st)?;
    let both = g.add(rows, cols)?;
    let diag = g.mul(both, eye)?;
    let total = g.sum(diag);
    g.scale(total, T::lit(-0.5 / n as f64))
}

/// Value of [`contrastive_loss`] for a plain matrix.
pub fn contrastive_loss_value<T: Real>(s: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let v = g.constant(s.clone());
    let l = contrastive_loss(&mut g, v)?;
    Ok(g.value(l).item())
}

/// Which side is the query in a retrieval evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Fraction of queries whose true match (same index) ranks within the top `k`
/// by dot-product similarity. Equal scores rank the lower index first.
pub fn retrieval_recall<T: Real>(images: &Tensor<T>, texts: &Tensor<T>, k: usize, direction: Direction) -> Result<f64> {
    let (si, st) = (images.shape(), texts.shape());
    if si.len() != 2 || si != st {
        return Err(Error::shape("retrieval_recall", format!("{si:?} vs {st:?}")));
    }
    let n = si[0];
    if k < 1 || k > n {
        return Err(Error::Input(format!("recall cutoff k={k} must lie in 1..={n}")));
    }
    let (queries, items) = match direction {
        Direction::ImageToText => (images, texts),
        Direction::TextToImage => (texts, images),
    };
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(x, y)| *x * *y).sum::<T>();
    let mut hits = 0usize;
    for q in 0..n {
        let qv = queries.row(q);
        let target = dot(qv, items.row(q));
        let mut rank = 0;
        for j in 0..n {
            let s = dot(qv, items.row(j));
            if s > target || (s == target && j < q) {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of nearest-class prediction from precomputed embeddings.
pub fn zero_shot_accuracy_from_embeddings<T: Real>(images: &Tensor<T>, classes: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if images.shape().len() != 2 || classes.shape().len() != 2 || images.shape()[1] != classes.shape()[1] {
        return Err(Error::shape(
            "zero_shot_classify",
            format!("images {:?} vs classes {:?}", images.shape(), classes.shape()),
        ));
    }
    if images.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::Input(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let c = classes.shape()[0];
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let scores: Vec<T> = (0..c)
            .map(|k| images.row(i).iter().zip(classes.row(k)).map(|(a, b)| *a * *b).sum())
            .collect();
        if argmax(&scores) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Per-class text embedding: the mean of the class's prompt embeddings, re-normalized.
pub fn class_embeddings<T: Real>(
    view: ModelView<'_, T>,
    opts: ForwardOptions,
    class_prompts: &[Vec<Vec<usize>>],
) -> Result<Tensor<T>> {
    if class_prompts.is_empty() {
        return Err(Error::Input("zero-shot classification needs at least one class".into()));
    }
    if let Some(k) = class_prompts.iter().position(Vec::is_empty) {
        return Err(Error::Input(format!("class {k} has no prompts")));
    }
    let flat: Vec<Vec<usize>> = class_prompts.iter().flatten().cloned().collect();
    let emb = embed_texts(view, opts, &TokenBatch::from_sequences(&flat))?;
    let d = emb.shape()[1];
    let mut out = Vec::with_capacity(class_prompts.len() * d);
    let mut row = 0;
    for prompts in class_prompts {
        let mut mean = vec![T::zero(); d];
        for _ in prompts {
            for (m, v) in mean.iter_mut().zip(emb.row(row)) {
                *m += *v;
            }
            row += 1;
        }
        let norm = mean.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if norm > T::zero() {
            mean.iter_mut().for_each(|v| *v /= norm);
        }
        out.extend(mean);
    }
    Tensor::new(vec![class_prompts.len(), d], out)
}

/// Embeds images in chunks of `chunk` rows.
pub fn embed_images_chunked<T: Real>(
    view: ModelView<'_, T>,
    opts: ForwardOptions,
    images: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    let shape = images.shape().to_vec();
    let n = shape[0];
    let per = images.numel() / n.max(1);
    let mut out: Vec<T> = Vec::new();
    let mut d = 0;
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(n);
        let mut s = shape.clone();
        s[0] = end - start;
        let part = Tensor::new(s, images.data()[start * per..end * per].to_vec())?;
        let e = embed_images(view, opts, &part)?;
        d = e.shape()[1];
        out.extend(e.into_data());
    }
    Tensor::new(vec![n, d], out)
}

/// Embeds token sequences in chunks of `chunk` rows.
pub fn embed_texts_chunked<T: Real>(
    view: ModelView<'_, T>,
    opts: ForwardOptions,
    tokens: &TokenBatch,
    chunk: usize,
) -> Result<Tensor<T>> {
    let mut out: Vec<T> = Vec::new();
    let mut d = 0;
    for start in (0..tokens.rows).step_by(chunk.max(1)) {
        let rows: Vec<usize> = (start..(start + chunk.max(1)).min(tokens.rows)).collect();
        let e = embed_texts(view, opts, &tokens.select(&rows))?;
        d = e.shape()[1];
        out.extend(e.into_data());
    }
    Tensor::new(vec![tokens.rows, d], out)
}

/// Zero-shot top-1 accuracy in `[0, 1]`.
pub fn zero_shot_classify<T: Real>(
    view: ModelView<'_, T>,
    opts: ForwardOptions,
    images: &Tensor<T>,
    labels: &[usize],
    class_prompts: &[Vec<Vec<usize>>],
) -> Result<f64> {
    let classes = class_embeddings(view, opts, class_prompts)?;
    let emb = embed_images_chunked(view, opts, images, 256)?;
    zero_shot_accuracy_from_embeddings(&emb, &classes, labels)
}
