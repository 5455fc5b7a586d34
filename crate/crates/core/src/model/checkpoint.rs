use std::path::Path;

use super::config::ModelConfig;
use super::params::{ModelParams, ParamGroup};
use crate::data::io::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LBCK";
const VERSION: u16 = 1;
const DTYPE_F32: &str = "f32";

/// A loaded checkpoint: parameters plus the run configuration text it was written with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub run_config: String,
}

impl Checkpoint {
    /// Refuses a checkpoint built against a different vocabulary.
    pub fn expect_vocab(&self, vocab_hash: u64) -> Result<()> {
        if self.params.vocab_hash() != vocab_hash {
            return Err(Error::Mismatch(format!(
                "checkpoint vocabulary hash {:016x} differs from {:016x}",
                self.params.vocab_hash(),
                vocab_hash
            )));
        }
        Ok(())
    }
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Backbone => 0,
        ParamGroup::Prompt => 1,
        ParamGroup::Head => 2,
    }
}

/// Header, config echo, manifest of `(name, group, dtype, shape)`, then one
/// little-endian f32 blob per array in manifest order.
pub fn checkpoint_bytes(params: &ModelParams, run_config: &str) -> Vec<u8> {
    let mut w = Writer::default();
    w.put(MAGIC);
    w.u16(VERSION);
    w.u64(params.vocab_hash());
    w.u8(u8::from(params.is_backbone_frozen()));
    w.string(&serde_json::to_string(params.config()).expect("config serialises"));
    w.string(run_config);
    w.u32(params.params().len() as u32);
    for p in params.params() {
        w.string(&p.name);
        w.u8(group_code(p.group));
        w.string(DTYPE_F32);
        w.u8(p.value.shape().len() as u8);
        p.value.shape().iter().for_each(|&s| w.u32(s as u32));
    }
    for p in params.params() {
        w.f32s(p.value.data().iter().map(|&v| v as f32));
    }
    w.buf
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, run_config: &str) -> Result<()> {
    write_file(path, &checkpoint_bytes(params, run_config))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse(&read_file(path)?)
}

pub(crate) fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let vocab_hash = r.u64("vocabulary hash")?;
    let at = r.offset();
    let frozen = match r.u8("frozen flag")? {
        0 => false,
        1 => true,
        x => return Err(Error::format(at, format!("frozen flag {x}"))),
    };
    let at = r.offset();
    let config: ModelConfig = serde_json::from_str(&r.string("model config")?)
        .map_err(|e| Error::format(at, format!("model config: {e}")))?;
    let run_config = r.string("run config")?;
    let count = r.u32("array count")? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("array name")?;
        let at = r.offset();
        let group = r.u8("group")?;
        if group > 2 {
            return Err(Error::format(at, format!("{name}: group code {group}")));
        }
        let at = r.offset();
        let dtype = r.string("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(at, format!("{name}: unsupported dtype {dtype:?}")));
        }
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("extent").map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape, at));
    }
    let mut values = Vec::with_capacity(count);
    for (name, shape, at) in manifest {
        let n: usize = shape.iter().product();
        let data = r.f32s(n, &name)?.into_iter().map(f64::from).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(at, format!("{name}: {e}")))?;
        values.push((name, t));
    }
    r.finish()?;
    let params = ModelParams::from_parts(config, vocab_hash, frozen, values)
        .map_err(|detail| Error::Mismatch(format!("checkpoint layout: {detail}")))?;
    Ok(Checkpoint { params, run_config })
}
