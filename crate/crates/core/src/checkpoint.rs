//! `FDCP` model checkpoints: every group network plus the prompt bank, using
//! the same little-endian f32 framing as the store format.
//!
//! ```text
//! "FDCP" version round stub_seed(u64) dim token_dim prompt_len hidden heads
//! num_groups global_len domain_len tau(f32) tau_w(f32)
//! per group:   domain_index, query, w_k, w_v, w_o, mlp_w1, mlp_b1, mlp_w2, mlp_b2
//! global prompt, domain prompts × num_groups
//! per domain:  history length, history matrices
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::inference::InferenceModel;
use crate::prompt::{NetShape, PromptBank, PromptNetParams, TextEncoderStub};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDCP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    pub stub_seed: u64,
    pub dim: usize,
    pub tau: f64,
    pub tau_w: f64,
    pub group_nets: BTreeMap<usize, PromptNetParams>,
    pub bank: PromptBank,
}

impl Checkpoint {
    pub fn net_shape(&self) -> Result<NetShape> {
        self.group_nets
            .values()
            .next()
            .map(PromptNetParams::shape)
            .ok_or_else(|| Error::Data("checkpoint has no group networks".into()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let shape = self.net_shape()?;
        let keys: Vec<usize> = self.group_nets.keys().copied().collect();
        if keys != (0..self.bank.num_domains()).collect::<Vec<_>>() {
            return Err(Error::Data(
                "group networks must cover every domain prompt".into(),
            ));
        }
        for net in self.group_nets.values() {
            net.validate()?;
            if net.shape() != shape {
                return Err(Error::Shape("group networks differ in shape".into()));
            }
        }
        self.bank.validate()?;
        let mut enc = Encoder::new();
        enc.bytes(CHECKPOINT_MAGIC);
        enc.u32(CHECKPOINT_VERSION);
        enc.u32(self.round as u32);
        enc.u64(self.stub_seed);
        for v in [
            self.dim,
            shape.token_dim,
            shape.prompt_len,
            shape.hidden,
            shape.heads,
            self.group_nets.len(),
            self.bank.global_prompt.nrows(),
            self.bank.domain_prompts.first().map_or(0, |p| p.nrows()),
        ] {
            enc.u32(v as u32);
        }
        enc.f32(self.tau);
        enc.f32(self.tau_w);
        for (&d, net) in &self.group_nets {
            enc.u32(d as u32);
            enc.matrix(&net.query);
            enc.matrix(&net.w_k);
            enc.matrix(&net.w_v);
            enc.matrix(&net.w_o);
            enc.matrix(&net.mlp_w1);
            enc.vector(&net.mlp_b1);
            enc.matrix(&net.mlp_w2);
            enc.vector(&net.mlp_b2);
        }
        enc.matrix(&self.bank.global_prompt);
        for p in &self.bank.domain_prompts {
            enc.matrix(p);
        }
        for hist in &self.bank.prompt_history {
            enc.u32(hist.len() as u32);
            for h in hist {
                enc.matrix(h);
            }
        }
        Ok(enc.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        let magic = dec
            .take(4, "magic")
            .map_err(|_| Error::Format("file too short for magic".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = dec.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let round = dec.u32("round")? as usize;
        let stub_seed = dec.u64("stub seed")?;
        let mut next = |what: &str| dec.u32(what).map(|v| v as usize);
        let dim = next("dim")?;
        let token_dim = next("token_dim")?;
        let prompt_len = next("prompt_len")?;
        let hidden = next("hidden")?;
        let heads = next("heads")?;
        let groups = next("num_groups")?;
        let global_len = next("global_len")?;
        let domain_len = next("domain_len")?;
        let shape = NetShape {
            prompt_len,
            hidden,
            heads,
            token_dim,
        };
        shape.validate().map_err(|e| Error::Corruption(e.to_string()))?;
        let tau = dec.f32("tau")?;
        let tau_w = dec.f32("tau_w")?;
        let mut group_nets = BTreeMap::new();
        for _ in 0..groups {
            let d = dec.u32("domain index")? as usize;
            let net = PromptNetParams {
                query: dec.matrix(prompt_len, hidden, "query")?,
                w_k: dec.matrix(token_dim, hidden, "w_k")?,
                w_v: dec.matrix(token_dim, hidden, "w_v")?,
                w_o: dec.matrix(hidden, hidden, "w_o")?,
                head_count: heads,
                mlp_w1: dec.matrix(hidden, hidden, "mlp_w1")?,
                mlp_b1: dec.vector(hidden, "mlp_b1")?,
                mlp_w2: dec.matrix(hidden, token_dim, "mlp_w2")?,
                mlp_b2: dec.vector(token_dim, "mlp_b2")?,
            };
            if group_nets.insert(d, net).is_some() {
                return Err(Error::Corruption(format!("domain {d} appears twice")));
            }
        }
        let global_prompt = dec.matrix(global_len, token_dim, "global prompt")?;
        let mut domain_prompts = Vec::with_capacity(groups);
        for _ in 0..groups {
            domain_prompts.push(dec.matrix(domain_len, token_dim, "domain prompt")?);
        }
        let mut prompt_history = Vec::with_capacity(groups);
        for _ in 0..groups {
            let n = dec.u32("history length")? as usize;
            let mut hist = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                hist.push(dec.matrix(domain_len, token_dim, "prompt history")?);
            }
            prompt_history.push(hist);
        }
        dec.finish()?;
        let bank = PromptBank {
            global_prompt,
            domain_prompts,
            prompt_history,
        };
        bank.validate()?;
        Ok(Checkpoint {
            round,
            stub_seed,
            dim,
            tau,
            tau_w,
            group_nets,
            bank,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn inference_model(&self) -> Result<InferenceModel> {
        let shape = self.net_shape()?;
        let model = InferenceModel {
            group_nets: self.group_nets.clone(),
            bank: self.bank.clone(),
            stub: TextEncoderStub::new(shape.token_dim, self.dim, self.stub_seed)?,
            tau: self.tau,
            tau_w: self.tau_w,
            fixed_global_weight: None,
        };
        model.validate()?;
        Ok(model)
    }
}
