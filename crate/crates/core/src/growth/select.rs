use std::cmp::Ordering;
use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_count, ArchSpec, ForwardOptions, ModelView, WeightStore};
use crate::objective::{class_embeddings, embed_images_chunked, zero_shot_accuracy_from_embeddings};
use crate::pipeline::log::{MetricRecord, Phase, ScoreInputs};
use crate::tensor::Tensor;

use super::space::GrowthSpace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Weight of the size reward.
    pub alpha: f64,
    /// Training-set size of the previous step.
    pub data_prev: usize,
    pub data_now: usize,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if self.data_prev == 0 || self.data_prev > self.data_now {
            return Err(Error::Config(format!(
                "need 0 < data_prev <= data_now, got {} and {}",
                self.data_prev, self.data_now
            )));
        }
        Ok(())
    }
}

/// A held-out zero-shot classification set.
#[derive(Clone, Debug)]
pub struct EvalData {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// `[class][prompt] -> token ids`.
    pub class_prompts: Vec<Vec<Vec<usize>>>,
}

/// `A + alpha · (N_prev / N_now) · (P_super / P)`.
pub fn composite_score(accuracy: f64, params: usize, supernet_params: usize, alpha: f64, data_prev: usize, data_now: usize) -> f64 {
    accuracy + alpha * (data_prev as f64 / data_now as f64) * (supernet_params as f64 / params as f64)
}

impl ScoreInputs {
    pub fn score(&self) -> f64 {
        composite_score(self.accuracy, self.params, self.supernet_params, self.alpha, self.data_prev, self.data_now)
    }
}

/// Index of the best `(score, params, factors)` entry: highest score, then
/// fewer parameters, then the lexicographically smaller factor tuple.
pub fn pick_winner(entries: &[(f64, usize, [usize; 6])]) -> Option<usize> {
    (0..entries.len()).min_by(|&a, &b| {
        let (sa, pa, fa) = &entries[a];
        let (sb, pb, fb) = &entries[b];
        sb.partial_cmp(sa)
            .unwrap_or(Ordering::Equal)
            .then(pa.cmp(pb))
            .then(fa.cmp(fb))
    })
}

/// Which factors the pooled text embedding depends on.
fn text_key(s: &ArchSpec) -> [usize; 4] {
    let shared_width = if s.blocks_shared > 0 { s.heads_img } else { 0 };
    [s.blocks_txt, s.heads_txt, s.blocks_shared, shared_width]
}

fn image_key(s: &ArchSpec) -> [usize; 4] {
    [s.conv_layers_img, s.blocks_img, s.heads_img, s.blocks_shared]
}

/// Scores every candidate on `eval` through its slice of `supernet` and
/// returns the winner plus one record per candidate (enumeration order) and
/// a final `Selected` record.
///
/// Embeddings are computed once per distinct encoder architecture and reused
/// by candidates that only differ in the other encoder.
pub fn select_architecture(
    space: &GrowthSpace,
    supernet: &WeightStore<f32>,
    cfg: &SelectionConfig,
    eval: &EvalData,
    forward: ForwardOptions,
    step: usize,
) -> Result<(ArchSpec, Vec<MetricRecord>)> {
    cfg.validate()?;
    if eval.labels.is_empty() {
        return Err(Error::Input("selection evaluation set is empty".into()));
    }
    let p_super = param_count(&space.supernet_spec);
    let mut texts: HashMap<[usize; 4], Tensor<f32>> = HashMap::new();
    let mut images: HashMap<[usize; 4], Tensor<f32>> = HashMap::new();
    let mut records = Vec::with_capacity(space.len() + 1);
    let mut entries = Vec::with_capacity(space.len());
    for (idx, cand) in space.candidates.iter().enumerate() {
        let start = Instant::now();
        let view = ModelView::new(supernet, cand)?;
        if !texts.contains_key(&text_key(cand)) {
            texts.insert(text_key(cand), class_embeddings(view, forward, &eval.class_prompts)?);
        }
        if !images.contains_key(&image_key(cand)) {
            images.insert(image_key(cand), embed_images_chunked(view, forward, &eval.images, 256)?);
        }
        let accuracy = zero_shot_accuracy_from_embeddings(&images[&image_key(cand)], &texts[&text_key(cand)], &eval.labels)?;
        let inputs = ScoreInputs {
            accuracy,
            params: param_count(cand),
            supernet_params: p_super,
            data_prev: cfg.data_prev,
            data_now: cfg.data_now,
            alpha: cfg.alpha,
        };
        let score = inputs.score();
        entries.push((score, inputs.params, cand.factors()));
        let mut rec = MetricRecord::new(step, Phase::Selection, cand, "score", score);
        rec.candidate = Some(idx);
        rec.spec = Some(cand.clone());
        rec.score_inputs = Some(inputs);
        rec.wall_seconds = start.elapsed().as_secs_f64();
        records.push(rec);
    }
    let best = pick_winner(&entries).expect("space is never empty");
    let winner = space.candidates[best].clone();
    let mut rec = MetricRecord::new(step, Phase::Selected, &winner, "score", entries[best].0);
    rec.candidate = Some(best);
    rec.spec = Some(winner.clone());
    records.push(rec);
    Ok((winner, records))
}

/// Recomputes the winner of one step from its `Selection` records.
pub fn replay_selection(records: &[MetricRecord]) -> Result<(usize, ArchSpec)> {
    let cands: Vec<&MetricRecord> = records.iter().filter(|r| r.phase == Phase::Selection).collect();
    let mut entries = Vec::with_capacity(cands.len());
    for r in &cands {
        let (inp, spec) = match (&r.score_inputs, &r.spec) {
            (Some(i), Some(s)) => (i, s),
            _ => return Err(Error::Input(format!("selection record {} lacks score inputs", r.seq))),
        };
        entries.push((inp.score(), inp.params, spec.factors()));
    }
    let best = pick_winner(&entries).ok_or_else(|| Error::Input("no selection records".into()))?;
    let r = cands[best];
    Ok((r.candidate.unwrap_or(best), r.spec.clone().expect("checked above")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_pair() {
        let a = composite_score(0.5, 100, 100, 0.5, 1, 2);
        let b = composite_score(0.4, 50, 100, 0.5, 1, 2);
        assert!((a - 0.75).abs() < 1e-12 && (b - 0.9).abs() < 1e-12);
        assert_eq!(pick_winner(&[(a, 100, [0; 6]), (b, 50, [1; 6])]), Some(1));
    }

    #[test]
    fn ties_prefer_small_then_lexicographic() {
        let e = [(1.0, 10, [0, 1, 0, 0, 0, 0]), (1.0, 5, [0, 0, 1, 0, 0, 0]), (1.0, 5, [0, 0, 0, 1, 0, 0])];
        assert_eq!(pick_winner(&e), Some(2));
        assert_eq!(pick_winner(&[]), None);
    }

    #[test]
    fn alpha_zero_is_accuracy_argmax() {
        let e: Vec<_> = [0.2, 0.7, 0.4]
            .iter()
            .enumerate()
            .map(|(i, &a)| (composite_score(a, 10 + i, 100, 0.0, 1, 1), 10 + i, [i; 6]))
            .collect();
        assert_eq!(pick_winner(&e), Some(1));
    }
}
