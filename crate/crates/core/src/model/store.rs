use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::spec::{ArchSpec, MLP_RATIO};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal truncated at two standard deviations.
    TruncNormal { std: f64 },
    Zeros,
    Ones,
    /// `ln(1/0.07)`, the log of the initial inverse temperature.
    LogitScale,
    /// Identity on the leading square plus truncated-normal noise.
    NearIdentity { noise_std: f64 },
}

impl Init {
    /// Whether the init draws random values (as opposed to a constant pattern).
    pub fn is_random(self) -> bool {
        matches!(self, Init::TruncNormal { .. } | Init::NearIdentity { .. })
    }
}

pub const INIT_TEMPERATURE: f64 = 1.0 / 0.07;
pub const MAX_TEMPERATURE: f64 = 100.0;

/// One entry of the canonical parameter table.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn normal(fan_in: usize) -> Init {
    Init::TruncNormal {
        std: 1.0 / (fan_in.max(1) as f64).sqrt(),
    }
}

fn push(out: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: Init) {
    out.push(ParamSpec { name, shape, init });
}

/// Parameters of one pre-norm transformer block at `width`. Shared blocks carry
/// one layernorm pair per modality at each site.
fn block_params(out: &mut Vec<ParamSpec>, prefix: &str, width: usize, shared: bool) {
    let hidden = MLP_RATIO * width;
    let ln_sites: &[&str] = if shared {
        &["ln1_img", "ln1_txt"]
    } else {
        &["ln1"]
    };
    for site in ln_sites {
        push(out, format!("{prefix}.{site}.gain"), vec![width], Init::Ones);
        push(out, format!("{prefix}.{site}.bias"), vec![width], Init::Zeros);
    }
    for proj in ["q", "k", "v", "o"] {
        push(out, format!("{prefix}.attn.w{proj}"), vec![width, width], normal(width));
        push(out, format!("{prefix}.attn.b{proj}"), vec![width], Init::Zeros);
    }
    let ln_sites: &[&str] = if shared {
        &["ln2_img", "ln2_txt"]
    } else {
        &["ln2"]
    };
    for site in ln_sites {
        push(out, format!("{prefix}.{site}.gain"), vec![width], Init::Ones);
        push(out, format!("{prefix}.{site}.bias"), vec![width], Init::Zeros);
    }
    push(out, format!("{prefix}.mlp.w1"), vec![width, hidden], normal(width));
    push(out, format!("{prefix}.mlp.b1"), vec![hidden], Init::Zeros);
    push(out, format!("{prefix}.mlp.w2"), vec![hidden, width], normal(hidden));
    push(out, format!("{prefix}.mlp.b2"), vec![width], Init::Zeros);
}

/// The canonical parameter table implied by `spec`, in construction order.
///
/// Every linear weight is stored `[in, out]`, and attention projections order
/// their columns head-major, so the first `h` heads of a wider model occupy
/// the leading columns (and, since width follows heads, the leading rows).
pub fn param_layout(spec: &ArchSpec) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let c = spec.stem_channels;
    let d = spec.width_img();
    let dt = spec.width_txt();
    let p = spec.patch_size;
    let e = spec.embed_dim;

    for k in 0..spec.conv_layers_img.saturating_sub(1) {
        push(&mut out, format!("img.stem.{k}.weight"), vec![c, c, 3, 3], normal(c * 9));
    }
    push(&mut out, "img.patch.weight".into(), vec![d, c, p, p], normal(c * p * p));
    push(&mut out, "img.cls".into(), vec![d], normal(d));
    push(&mut out, "img.pos".into(), vec![spec.image_tokens(), d], normal(d));
    for i in 0..spec.blocks_img {
        block_params(&mut out, &format!("img.block.{i}"), d, false);
    }
    push(&mut out, "img.ln_post.gain".into(), vec![d], Init::Ones);
    push(&mut out, "img.ln_post.bias".into(), vec![d], Init::Zeros);
    push(&mut out, "img.proj".into(), vec![d, e], normal(d));

    push(&mut out, "txt.tok".into(), vec![spec.vocab_size, dt], normal(dt));
    push(&mut out, "txt.pos".into(), vec![spec.max_text_len, dt], normal(dt));
    for i in 0..spec.blocks_txt {
        block_params(&mut out, &format!("txt.block.{i}"), dt, false);
    }
    if spec.blocks_shared > 0 {
        push(
            &mut out,
            "txt.adapter".into(),
            vec![dt, d],
            Init::NearIdentity {
                noise_std: 0.01 / (dt as f64).sqrt(),
            },
        );
        for i in 0..spec.blocks_shared {
            block_params(&mut out, &format!("shared.block.{i}"), d, true);
        }
    }
    let wh = spec.width_txt_head();
    push(&mut out, "txt.ln_final.gain".into(), vec![wh], Init::Ones);
    push(&mut out, "txt.ln_final.bias".into(), vec![wh], Init::Zeros);
    push(&mut out, "txt.proj".into(), vec![wh, e], normal(spec.width_txt_out()));

    push(&mut out, "logit_scale".into(), vec![1], Init::LogitScale);
    out
}

/// Exact scalar-parameter count of `spec`, in closed form.
pub fn param_count(spec: &ArchSpec) -> usize {
    let block = |w: usize| 12 * w * w + 13 * w;
    let c = spec.stem_channels;
    let d = spec.width_img();
    let dt = spec.width_txt();
    let e = spec.embed_dim;
    let p = spec.patch_size;

    let stem = (spec.conv_layers_img - 1) * 9 * c * c;
    let image = stem
        + d * c * p * p
        + d
        + spec.image_tokens() * d
        + spec.blocks_img * block(d)
        + 2 * d
        + d * e;
    let text = (spec.vocab_size + spec.max_text_len) * dt + spec.blocks_txt * block(dt);
    let shared = if spec.blocks_shared > 0 {
        dt * d + spec.blocks_shared * (block(d) + 4 * d)
    } else {
        0
    };
    let wh = spec.width_txt_head();
    image + text + shared + 2 * wh + wh * e + 1
}

/// Stable 64-bit seed for one tensor of one model.
pub(crate) fn tensor_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the model seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn trunc_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Materializes one parameter. Deterministic in `(seed, name)` alone.
pub fn init_tensor<T: Real>(p: &ParamSpec, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, &p.name));
    match p.init {
        Init::TruncNormal { std } => Tensor::from_fn(&p.shape, |_| T::lit(std * trunc_normal(&mut rng))),
        Init::Zeros => Tensor::zeros(&p.shape),
        Init::Ones => Tensor::full(&p.shape, T::one()),
        Init::LogitScale => Tensor::full(&p.shape, T::lit(INIT_TEMPERATURE.ln())),
        Init::NearIdentity { noise_std } => {
            let cols = p.shape[1];
            Tensor::from_fn(&p.shape, |i| {
                let eye = if i / cols == i % cols { 1.0 } else { 0.0 };
                T::lit(eye + noise_std * trunc_normal(&mut rng))
            })
        }
    }
}

/// All parameters of one model, keyed by canonical name.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore<T: Real> {
    spec: ArchSpec,
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Fresh deterministic initialization of `spec`.
pub fn build_model<T: Real>(spec: &ArchSpec, seed: u64) -> Result<WeightStore<T>> {
    spec.validate()?;
    let tensors = param_layout(spec)
        .iter()
        .map(|p| (p.name.clone(), init_tensor(p, seed)))
        .collect();
    Ok(WeightStore {
        spec: spec.clone(),
        tensors,
    })
}

impl<T: Real> WeightStore<T> {
    /// Assembles a store, checking the name set and shapes against `spec` in both directions.
    pub fn from_tensors(spec: ArchSpec, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let store = WeightStore { spec, tensors };
        store.check_layout()?;
        Ok(store)
    }

    pub fn check_layout(&self) -> Result<()> {
        let layout = param_layout(&self.spec);
        let expected: BTreeSet<&str> = layout.iter().map(|p| p.name.as_str()).collect();
        let present: BTreeSet<&str> = self.tensors.keys().map(String::as_str).collect();
        let missing: Vec<_> = expected.difference(&present).collect();
        let extra: Vec<_> = present.difference(&expected).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter names disagree with spec {}: missing {missing:?}, unexpected {extra:?}",
                self.spec.label()
            )));
        }
        for p in &layout {
            let have = self.tensors[&p.name].shape();
            if have != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {have:?}, spec implies {:?}",
                    p.name, p.shape
                )));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Input(format!("no parameter named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Sum of element counts.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> WeightStore<U> {
        WeightStore {
            spec: self.spec.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn into_parts(self) -> (ArchSpec, BTreeMap<String, Tensor<T>>) {
        (self.spec, self.tensors)
    }

    pub fn max_abs_diff(&self, other: &WeightStore<T>) -> Option<T> {
        if self.spec != other.spec {
            return None;
        }
        Some(
            self.tensors
                .iter()
                .map(|(k, v)| v.max_abs_diff(&other.tensors[k]))
                .fold(T::zero(), T::max),
        )
    }
}
