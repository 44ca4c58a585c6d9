use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{BOS, EOS, PAD};

use super::render::{Color, Position, Shape};

/// Caption templates; `{c}` color, `{s}` shape, `{z}` size word, `{p}` placement.
pub const CAPTION_TEMPLATES: [&str; 5] = [
    "a photo of a {z} {c} {s} in the {p}",
    "a {c} {s} in the {p}",
    "there is a {z} {c} {s} at the {p}",
    "an image of a {c} {s} on the {p}",
    "a picture showing a {z} {c} {s} near the {p}",
];

/// Zero-shot prompt templates; `{}` is the class name, e.g. `red circle`.
pub const PROMPT_TEMPLATES: [&str; 4] = [
    "a photo of a {}",
    "a {}",
    "an image of a {}",
    "there is a {}",
];

pub const SIZE_WORDS: [&str; 2] = ["small", "large"];

/// Closed word-level vocabulary over every caption and prompt the corpus can emit.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut words: Vec<String> = vec!["<pad>".into(), "<bos>".into(), "<eos>".into()];
        let mut add = |w: &str| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for t in CAPTION_TEMPLATES.iter().chain(PROMPT_TEMPLATES.iter()) {
            for w in t.split_whitespace().filter(|w| !w.starts_with('{')) {
                add(w);
            }
        }
        for c in Color::ALL {
            add(c.name());
        }
        for s in Shape::ALL {
            add(s.name());
        }
        for p in Position::ALL {
            p.name().split_whitespace().for_each(&mut add);
        }
        SIZE_WORDS.iter().for_each(|w| add(w));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        debug_assert_eq!((PAD, BOS, EOS), (0, 1, 2));
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Lowercased whitespace tokens wrapped in BOS/EOS.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        for w in text.split_whitespace() {
            let w = w.to_lowercase();
            let id = self
                .index
                .get(&w)
                .ok_or_else(|| Error::Input(format!("word `{w}` is not in the vocabulary")))?;
            ids.push(*id);
        }
        ids.push(EOS);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i > EOS)
            .filter_map(|&i| self.words.get(i).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

pub fn fill_caption(template: &str, color: Color, shape: Shape, size: &str, pos: Position) -> String {
    template
        .replace("{c}", color.name())
        .replace("{s}", shape.name())
        .replace("{z}", size)
        .replace("{p}", pos.name())
}

/// Token sequences for every class: `[class][prompt] -> ids`. Classes are
/// ordered by label (`shape * 4 + color`).
pub fn class_prompts(vocab: &Vocabulary) -> Result<Vec<Vec<Vec<usize>>>> {
    (0..super::NUM_CLASSES)
        .map(|label| {
            let name = super::class_name(label);
            PROMPT_TEMPLATES
                .iter()
                .map(|t| vocab.encode(&t.replace("{}", &name)))
                .collect()
        })
        .collect()
}
