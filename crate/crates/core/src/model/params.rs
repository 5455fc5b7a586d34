use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::Result;
use crate::rng::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Which optimiser group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Encoder, decoder and word embeddings. Frozen after warm-up.
    Backbone,
    Prompt,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncBlock {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub mlp: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecBlock {
    pub ln1: Norm,
    pub self_attn: Attn,
    pub ln2: Norm,
    pub cross: Attn,
    pub ln3: Norm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub patch: Linear,
    pub enc_pos: ParamId,
    pub enc_blocks: Vec<EncBlock>,
    pub enc_ln: Norm,
    pub embed: ParamId,
    pub dec_pos: ParamId,
    pub dec_blocks: Vec<DecBlock>,
    pub dec_ln: Norm,
    pub prompt: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Every learnable array of the model, in a fixed order.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    params: Vec<NamedParam>,
    pub(crate) layout: Layout,
    vocab_hash: u64,
    backbone_frozen: bool,
}

struct Builder<'a, R: rand::Rng> {
    params: Vec<NamedParam>,
    rng: &'a mut R,
}

impl<R: rand::Rng> Builder<'_, R> {
    fn add(&mut self, name: String, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(NamedParam { name, group, value });
        ParamId(self.params.len() - 1)
    }

    fn randn(&mut self, name: String, group: ParamGroup, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, group, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        let std = gain / (fan_in as f64).sqrt();
        Linear {
            w: self.randn(format!("{name}.w"), ParamGroup::Backbone, &[fan_in, fan_out], std),
            b: self.add(format!("{name}.b"), ParamGroup::Backbone, Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), ParamGroup::Backbone, Tensor::full(&[d], 1.0)),
            bias: self.add(format!("{name}.bias"), ParamGroup::Backbone, Tensor::zeros(&[d])),
        }
    }

    fn attn(&mut self, name: &str, d: usize, out_gain: f64) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d, 1.0),
            k: self.linear(&format!("{name}.k"), d, d, 1.0),
            v: self.linear(&format!("{name}.v"), d, d, 1.0),
            o: self.linear(&format!("{name}.o"), d, d, out_gain),
        }
    }

    fn mlp(&mut self, name: &str, d: usize, hidden: usize, out_gain: f64) -> Mlp {
        Mlp {
            fc1: self.linear(&format!("{name}.fc1"), d, hidden, 1.0),
            fc2: self.linear(&format!("{name}.fc2"), hidden, d, out_gain),
        }
    }
}

pub const PROMPT_INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Random initialisation. The parameter order and names only depend on `config`.
    pub fn init(config: &ModelConfig, vocab_hash: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.d_model;
        let mut r = rng(seed);
        let mut b = Builder { params: Vec::new(), rng: &mut r };
        let enc_out = 1.0 / (2.0 * c.enc_blocks.max(1) as f64).sqrt();
        let dec_out = 1.0 / (2.0 * c.dec_blocks.max(1) as f64).sqrt();

        let patch = b.linear("enc.patch", c.patch_dim(), d, 1.0);
        let enc_pos = b.randn("enc.pos".into(), ParamGroup::Backbone, &[c.num_patches(), d], 0.1);
        let enc_blocks = (0..c.enc_blocks)
            .map(|i| EncBlock {
                ln1: b.norm(&format!("enc.{i}.ln1"), d),
                attn: b.attn(&format!("enc.{i}.attn"), d, enc_out),
                ln2: b.norm(&format!("enc.{i}.ln2"), d),
                mlp: b.mlp(&format!("enc.{i}.mlp"), d, c.mlp_hidden, enc_out),
            })
            .collect();
        let enc_ln = b.norm("enc.ln", d);

        let embed = b.randn("dec.embed".into(), ParamGroup::Backbone, &[c.vocab_size, d], 1.0);
        let dec_pos = b.randn("dec.pos".into(), ParamGroup::Backbone, &[c.max_positions, d], 0.5);
        let dec_blocks = (0..c.dec_blocks)
            .map(|i| DecBlock {
                ln1: b.norm(&format!("dec.{i}.ln1"), d),
                self_attn: b.attn(&format!("dec.{i}.self"), d, dec_out),
                ln2: b.norm(&format!("dec.{i}.ln2"), d),
                cross: b.attn(&format!("dec.{i}.cross"), d, dec_out),
                ln3: b.norm(&format!("dec.{i}.ln3"), d),
                mlp: b.mlp(&format!("dec.{i}.mlp"), d, c.mlp_hidden, dec_out),
            })
            .collect();
        let dec_ln = b.norm("dec.ln", d);

        let prompt = b.randn("prompt".into(), ParamGroup::Prompt, &[c.n_prompt, d], PROMPT_INIT_STD);
        let head_w = b.randn("head.w".into(), ParamGroup::Head, &[c.classes, d], 0.02);
        let head_b = b.add("head.b".into(), ParamGroup::Head, Tensor::zeros(&[c.classes]));

        let layout = Layout {
            patch,
            enc_pos,
            enc_blocks,
            enc_ln,
            embed,
            dec_pos,
            dec_blocks,
            dec_ln,
            prompt,
            head_w,
            head_b,
        };
        let mut p = ModelParams {
            config: c.clone(),
            params: b.params,
            layout,
            vocab_hash,
            backbone_frozen: false,
        };
        p.snap_to_f32();
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Mutable access by name, for tests and hand-built models.
    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn word_embeddings(&self) -> &Tensor {
        self.get(self.layout.embed)
    }

    pub fn soft_prompt(&self) -> &Tensor {
        self.get(self.layout.prompt)
    }

    pub fn head_weight(&self) -> &Tensor {
        self.get(self.layout.head_w)
    }

    pub fn head_bias(&self) -> &Tensor {
        self.get(self.layout.head_b)
    }

    pub fn is_backbone_frozen(&self) -> bool {
        self.backbone_frozen
    }

    pub fn freeze_backbone(&mut self) {
        self.backbone_frozen = true;
    }

    /// Groups an optimiser may touch in the current phase.
    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        if self.backbone_frozen {
            vec![ParamGroup::Prompt, ParamGroup::Head]
        } else {
            vec![ParamGroup::Backbone]
        }
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn snap_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Raw bytes of every parameter in `group`, for bit-level comparisons.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        vocab_hash: u64,
        backbone_frozen: bool,
        values: Vec<(String, Tensor)>,
    ) -> std::result::Result<Self, String> {
        let mut p = ModelParams::init(&config, vocab_hash, 0).map_err(|e| e.to_string())?;
        if values.len() != p.params.len() {
            return Err(format!("{} arrays, layout expects {}", values.len(), p.params.len()));
        }
        for (slot, (name, t)) in p.params.iter_mut().zip(values) {
            if slot.name != name || slot.value.shape() != t.shape() {
                return Err(format!(
                    "array {name} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    slot.name,
                    slot.value.shape()
                ));
            }
            slot.value = t;
        }
        p.backbone_frozen = backbone_frozen;
        Ok(p)
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ModelParams,
    vars: Vec<Option<Var>>,
    grad_groups: Vec<ParamGroup>,
}

impl<'p> Graph<'p> {
    /// Parameters in `grad_groups` become differentiable leaves; the rest are constants.
    pub fn new(params: &'p ModelParams, grad_groups: &[ParamGroup]) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            vars: vec![None; params.params.len()],
            grad_groups: grad_groups.to_vec(),
        }
    }

    /// Graph with no differentiable parameters.
    pub fn inference(params: &'p ModelParams) -> Self {
        Self::new(params, &[])
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let np = &self.params.params[id.0];
        let v = self.tape.leaf(np.value.clone(), self.grad_groups.contains(&np.group));
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of all bound parameters in `group`, by parameter index.
    pub fn grads(&self, group: ParamGroup) -> Vec<(usize, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter(|(i, _)| self.params.params[*i].group == group)
            .filter_map(|(i, v)| v.and_then(|v| self.tape.grad(v)).map(|g| (i, g.clone())))
            .collect()
    }
}
