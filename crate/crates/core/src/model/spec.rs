use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the six architecture factors that can grow between steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthFactor {
    ConvLayersImg,
    BlocksImg,
    HeadsImg,
    BlocksTxt,
    HeadsTxt,
    BlocksShared,
}

impl GrowthFactor {
    /// Canonical order; candidate enumeration is lexicographic over it.
    pub const ALL: [GrowthFactor; 6] = [
        GrowthFactor::ConvLayersImg,
        GrowthFactor::BlocksImg,
        GrowthFactor::HeadsImg,
        GrowthFactor::BlocksTxt,
        GrowthFactor::HeadsTxt,
        GrowthFactor::BlocksShared,
    ];

    /// Amount added when the factor grows: +2 conv layers, +4 blocks or heads.
    pub fn increment(self) -> usize {
        match self {
            GrowthFactor::ConvLayersImg => 2,
            _ => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GrowthFactor::ConvLayersImg => "conv_layers_img",
            GrowthFactor::BlocksImg => "blocks_img",
            GrowthFactor::HeadsImg => "heads_img",
            GrowthFactor::BlocksTxt => "blocks_txt",
            GrowthFactor::HeadsTxt => "heads_txt",
            GrowthFactor::BlocksShared => "blocks_shared",
        }
    }
}

impl fmt::Display for GrowthFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GrowthFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GrowthFactor::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown growth factor `{s}`")))
    }
}

fn default_stem_channels() -> usize {
    32
}

/// Complete architecture descriptor of the dual-stream model with optional shared encoder.
///
/// Widths derive from heads: image width is `heads_img * head_dim_img`, text
/// width is `heads_txt * head_dim_txt`, and the shared encoder runs at image width.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub conv_layers_img: usize,
    pub blocks_img: usize,
    pub heads_img: usize,
    pub blocks_txt: usize,
    pub heads_txt: usize,
    pub blocks_shared: usize,
    pub head_dim_img: usize,
    pub head_dim_txt: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Channel width of the stride-1 convolutional stem.
    #[serde(default = "default_stem_channels")]
    pub stem_channels: usize,
}

/// Hidden width of every transformer MLP relative to the block width.
pub const MLP_RATIO: usize = 4;

impl ArchSpec {
    /// The step-1 base: 6 image blocks with 6 heads (width 384), 6 text blocks
    /// with 4 heads (width 256), one conv layer, no shared encoder.
    pub fn base(vocab_size: usize) -> Self {
        ArchSpec {
            conv_layers_img: 1,
            blocks_img: 6,
            heads_img: 6,
            blocks_txt: 6,
            heads_txt: 4,
            blocks_shared: 0,
            head_dim_img: 64,
            head_dim_txt: 64,
            embed_dim: 256,
            patch_size: 8,
            image_size: 32,
            vocab_size,
            max_text_len: 16,
            stem_channels: default_stem_channels(),
        }
    }

    pub fn factor(&self, f: GrowthFactor) -> usize {
        match f {
            GrowthFactor::ConvLayersImg => self.conv_layers_img,
            GrowthFactor::BlocksImg => self.blocks_img,
            GrowthFactor::HeadsImg => self.heads_img,
            GrowthFactor::BlocksTxt => self.blocks_txt,
            GrowthFactor::HeadsTxt => self.heads_txt,
            GrowthFactor::BlocksShared => self.blocks_shared,
        }
    }

    pub fn set_factor(&mut self, f: GrowthFactor, value: usize) {
        match f {
            GrowthFactor::ConvLayersImg => self.conv_layers_img = value,
            GrowthFactor::BlocksImg => self.blocks_img = value,
            GrowthFactor::HeadsImg => self.heads_img = value,
            GrowthFactor::BlocksTxt => self.blocks_txt = value,
            GrowthFactor::HeadsTxt => self.heads_txt = value,
            GrowthFactor::BlocksShared => self.blocks_shared = value,
        }
    }

    pub fn factors(&self) -> [usize; 6] {
        GrowthFactor::ALL.map(|f| self.factor(f))
    }

    pub fn with_factor(mut self, f: GrowthFactor, value: usize) -> Self {
        self.set_factor(f, value);
        self
    }

    pub fn width_img(&self) -> usize {
        self.heads_img * self.head_dim_img
    }

    pub fn width_txt(&self) -> usize {
        self.heads_txt * self.head_dim_txt
    }

    /// Width of the text stream at its pooling point.
    pub fn width_txt_out(&self) -> usize {
        if self.blocks_shared > 0 {
            self.width_img()
        } else {
            self.width_txt()
        }
    }

    /// Rows of the text head (`txt.ln_final`, `txt.proj`). Covers both the
    /// shared and the unshared pooling width, so every candidate's head is a
    /// leading box of its supernet's; the forward pass reads the first
    /// `width_txt_out` rows.
    pub fn width_txt_head(&self) -> usize {
        self.width_txt().max(self.width_txt_out())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image token count including the class token.
    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.conv_layers_img < 1 {
            problems.push("conv_layers_img must be >= 1".to_string());
        }
        if self.blocks_img < 1 {
            problems.push("blocks_img must be >= 1".to_string());
        }
        if self.blocks_txt < 1 {
            problems.push("blocks_txt must be >= 1".to_string());
        }
        for (name, v) in [
            ("heads_img", self.heads_img),
            ("heads_txt", self.heads_txt),
            ("head_dim_img", self.head_dim_img),
            ("head_dim_txt", self.head_dim_txt),
            ("embed_dim", self.embed_dim),
            ("patch_size", self.patch_size),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if self.stem_channels < 3 {
            problems.push(format!("stem_channels must be >= 3 (got {})", self.stem_channels));
        }
        if self.patch_size > 0 && (self.image_size == 0 || self.image_size % self.patch_size != 0) {
            problems.push(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(problems.join("; ")))
        }
    }

    /// Non-growable fields agree.
    pub fn same_family(&self, other: &ArchSpec) -> bool {
        self.head_dim_img == other.head_dim_img
            && self.head_dim_txt == other.head_dim_txt
            && self.embed_dim == other.embed_dim
            && self.patch_size == other.patch_size
            && self.image_size == other.image_size
            && self.vocab_size == other.vocab_size
            && self.max_text_len == other.max_text_len
            && self.stem_channels == other.stem_channels
    }

    /// `self <= other` in every growable factor, within the same family.
    pub fn fits_within(&self, other: &ArchSpec) -> bool {
        self.same_family(other)
            && GrowthFactor::ALL
                .iter()
                .all(|&f| self.factor(f) <= other.factor(f))
    }

    /// Short label, e.g. `l1-bi6-hi6-bt6-ht4-bs0`.
    pub fn label(&self) -> String {
        format!(
            "l{}-bi{}-hi{}-bt{}-ht{}-bs{}",
            self.conv_layers_img,
            self.blocks_img,
            self.heads_img,
            self.blocks_txt,
            self.heads_txt,
            self.blocks_shared
        )
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "image encoder:  conv layers {}, blocks {}, heads {} (width {})",
            self.conv_layers_img, self.blocks_img, self.heads_img, self.width_img())?;
        writeln!(f, "text encoder:   blocks {}, heads {} (width {})",
            self.blocks_txt, self.heads_txt, self.width_txt())?;
        writeln!(f, "shared encoder: blocks {}", self.blocks_shared)?;
        write!(
            f,
            "embed dim {}, image {}px / patch {}px, vocab {}, max text len {}",
            self.embed_dim, self.image_size, self.patch_size, self.vocab_size, self.max_text_len
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_widths() {
        let s = ArchSpec::base(40);
        assert_eq!(s.width_img(), 384);
        assert_eq!(s.width_txt(), 256);
        assert_eq!(s.blocks_shared, 0);
        assert_eq!(s.image_tokens(), 17);
        s.validate().unwrap();
    }

    #[test]
    fn validation_reports_problems() {
        let mut s = ArchSpec::base(40);
        s.image_size = 30;
        s.blocks_img = 0;
        let msg = s.validate().unwrap_err().to_string();
        assert!(msg.contains("divisible") && msg.contains("blocks_img"), "{msg}");
    }

    #[test]
    fn factor_round_trip() {
        let mut s = ArchSpec::base(40);
        for (i, f) in GrowthFactor::ALL.into_iter().enumerate() {
            s.set_factor(f, 10 + i);
        }
        assert_eq!(s.factors(), [10, 11, 12, 13, 14, 15]);
        assert_eq!("heads_txt".parse::<GrowthFactor>().unwrap(), GrowthFactor::HeadsTxt);
    }
}
