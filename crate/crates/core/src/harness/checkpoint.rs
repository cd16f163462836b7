//! Binary checkpoints: `"AUF1"`, a version byte, a `u32` block count, then
//! per block a `u32`-prefixed name, a `u32` rank, `u32` dims and
//! little-endian `f32` values. The architecture travels as `meta.*` blocks.

use std::io::{Read, Write};
use std::path::Path;

use avau_tensor::{Band, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::model::{AuModel, ModelConfig};

pub const MAGIC: &[u8; 4] = b"AUF1";
pub const VERSION: u8 = 1;

fn meta_blocks(c: &ModelConfig) -> Vec<(String, Vec<f32>)> {
    let list = |v: &[usize]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    let one = |x: f64| vec![x as f32];
    vec![
        ("meta.audio_patch".into(), list(&[c.audio_patch_t, c.audio_patch_f])),
        ("meta.encoder.resolution".into(), one(c.encoder.resolution as f64)),
        ("meta.encoder.widths".into(), list(&c.encoder.widths)),
        ("meta.encoder.depths".into(), list(&c.encoder.depths)),
        ("meta.encoder.kernel".into(), one(c.encoder.kernel as f64)),
        ("meta.encoder.patch".into(), one(c.encoder.patch as f64)),
        ("meta.fusion.dim".into(), one(c.fusion.dim as f64)),
        ("meta.fusion.factors".into(), list(&c.fusion.factors)),
        ("meta.fusion.window".into(), one(c.fusion.window as f64)),
        ("meta.fusion.heads".into(), one(c.fusion.heads as f64)),
        (
            "meta.fusion.band".into(),
            one(if c.fusion.band == Band::Causal { 0.0 } else { 1.0 }),
        ),
        ("meta.tcn.kernel".into(), one(c.tcn.kernel as f64)),
        ("meta.tcn.dilations".into(), list(&c.tcn.dilations)),
        ("meta.tcn.channels".into(), one(c.tcn.channels as f64)),
        ("meta.tcn.residual".into(), one(if c.tcn.residual { 1.0 } else { 0.0 })),
        ("meta.head.hidden".into(), one(c.hidden as f64)),
        ("meta.head.dropout".into(), one(c.dropout)),
    ]
}

fn write_block(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode(model: &AuModel<f32>) -> Vec<u8> {
    let meta = meta_blocks(&model.config);
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.push(VERSION);
    out.extend(((meta.len() + model.params.len()) as u32).to_le_bytes());
    for (name, data) in &meta {
        write_block(&mut out, name, &[data.len()], data);
    }
    for (name, t) in model.params.iter() {
        write_block(&mut out, name, t.shape(), t.data());
    }
    out
}

pub fn save_checkpoint(path: &Path, model: &AuModel<f32>) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.buf.len() < n {
            return Err("truncated checkpoint".into());
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<AuModel<f32>, String> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()?;
    let mut meta = std::collections::HashMap::new();
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "block name is not UTF-8")?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = r
            .take(numel.checked_mul(4).ok_or("block too large")?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if name.starts_with("meta.") {
            meta.insert(name, data);
        } else {
            let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
            if params.id(&name).is_some() {
                return Err(format!("duplicate block {name}"));
            }
            params.add(name, t);
        }
    }
    if !r.buf.is_empty() {
        return Err("trailing bytes after last block".into());
    }
    let get = |k: &str| meta.get(k).ok_or_else(|| format!("missing {k}"));
    let list =
        |k: &str| -> std::result::Result<Vec<usize>, String> { Ok(get(k)?.iter().map(|&x| x as usize).collect()) };
    let one =
        |k: &str| -> std::result::Result<f32, String> { get(k)?.first().copied().ok_or_else(|| format!("empty {k}")) };
    let patch = list("meta.audio_patch")?;
    if patch.len() != 2 {
        return Err("meta.audio_patch needs two values".into());
    }
    let mut cfg = ModelConfig::default();
    (cfg.audio_patch_t, cfg.audio_patch_f) = (patch[0], patch[1]);
    cfg.encoder.resolution = one("meta.encoder.resolution")? as usize;
    cfg.encoder.widths = list("meta.encoder.widths")?;
    cfg.encoder.depths = list("meta.encoder.depths")?;
    cfg.encoder.kernel = one("meta.encoder.kernel")? as usize;
    cfg.encoder.patch = one("meta.encoder.patch")? as usize;
    cfg.fusion.dim = one("meta.fusion.dim")? as usize;
    cfg.fusion.factors = list("meta.fusion.factors")?;
    cfg.fusion.window = one("meta.fusion.window")? as usize;
    cfg.fusion.heads = one("meta.fusion.heads")? as usize;
    cfg.fusion.band = if one("meta.fusion.band")? == 0.0 {
        Band::Causal
    } else {
        Band::Centered
    };
    cfg.tcn.kernel = one("meta.tcn.kernel")? as usize;
    cfg.tcn.dilations = list("meta.tcn.dilations")?;
    cfg.tcn.channels = one("meta.tcn.channels")? as usize;
    cfg.tcn.residual = one("meta.tcn.residual")? != 0.0;
    cfg.hidden = one("meta.head.hidden")? as usize;
    // shortest f32 decimal, so 0.3 comes back as 0.3 rather than its f32 widening
    cfg.dropout = one("meta.head.dropout")?.to_string().parse().expect("float text");
    let mut model = AuModel::<f32>::new(cfg, 0).map_err(|e| e.to_string())?;
    if params.len() != model.params.len() {
        return Err(format!(
            "{} parameter blocks, architecture has {}",
            params.len(),
            model.params.len()
        ));
    }
    model.params.load_from(&params).map_err(|e| e.to_string())?;
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<AuModel<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}
