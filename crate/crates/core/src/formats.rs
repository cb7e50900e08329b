//! Bit-exact binary file formats: dataset directories (gpr.bin / irt.bin /
//! labels.bin / manifest.json) and model checkpoints (model.ckpt + model.json
//! sidecar). All integers and floats little-endian; thermal patches are
//! channel-last on disk and channel-first in memory.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::irt::BnState;
use crate::model::{param_specs, Model, ModelDims};
use crate::optim::AdamW;
use crate::synth::{Dataset, Manifest};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC_GPR: &[u8; 4] = b"GPRB";
const MAGIC_IRT: &[u8; 4] = b"IRTB";
const MAGIC_LABELS: &[u8; 4] = b"LABL";
const MAGIC_MODEL: &[u8; 4] = b"MMDL";
const FORMAT_VERSION: u32 = 1;

/// Checkpoint companion document: the experiment configuration that produced
/// the weights plus the optimizer step for exact bias-correction on resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub config: ExperimentConfig,
    pub optimizer_step: Option<u64>,
}

impl Sidecar {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let s: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("sidecar parse failure: {e}")))?;
        s.config.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vals: impl Iterator<Item = f32>) {
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn finish(self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.buf).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
    file: String,
}

impl Reader {
    fn open(path: &Path) -> Result<Self> {
        let buf =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(Reader {
            buf,
            pos: 0,
            file: path.display().to_string(),
        })
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            file: self.file.clone(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!(
                "truncated: wanted {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expect {
            let msg = format!("bad magic {got:?}, expected {expect:?}");
            return Err(self.fail(msg));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(self.fail(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!(
                "{} trailing bytes after expected end",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Write a dataset directory: manifest.json plus the three binary blocks.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.check()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let m = &ds.manifest;
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    std::fs::write(&manifest_path, text + "\n")
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    let mut w = Writer::new(MAGIC_GPR);
    w.u32(m.n as u32);
    w.u32(m.gpr_len as u32);
    w.f32s(ds.gpr.iter().copied());
    w.finish(&dir.join("gpr.bin"))?;

    let mut w = Writer::new(MAGIC_IRT);
    w.u32(m.n as u32);
    w.u32(m.irt_h as u32);
    w.u32(m.irt_w as u32);
    w.u32(m.irt_c as u32);
    let (h, wd, c) = (m.irt_h, m.irt_w, m.irt_c);
    let chw = c * h * wd;
    w.f32s((0..m.n).flat_map(|i| {
        let sample = &ds.irt[i * chw..(i + 1) * chw];
        (0..h).flat_map(move |y| {
            (0..wd).flat_map(move |x| (0..c).map(move |ch| sample[(ch * h + y) * wd + x]))
        })
    }));
    w.finish(&dir.join("irt.bin"))?;

    let mut w = Writer::new(MAGIC_LABELS);
    w.u32(m.n as u32);
    w.buf.extend_from_slice(&ds.labels);
    w.finish(&dir.join("labels.bin"))
}

/// Read a dataset directory back; every block is cross-checked against the
/// manifest and internal consistency re-validated.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("manifest parse failure: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }

    let mut r = Reader::open(&dir.join("gpr.bin"))?;
    r.magic(MAGIC_GPR)?;
    let n = r.u32()? as usize;
    let len = r.u32()? as usize;
    if n != manifest.n || len != manifest.gpr_len {
        return Err(r.fail(format!(
            "header {n}×{len} disagrees with manifest {}×{}",
            manifest.n, manifest.gpr_len
        )));
    }
    let gpr = r.f32s(n * len)?;
    r.done()?;

    let mut r = Reader::open(&dir.join("irt.bin"))?;
    r.magic(MAGIC_IRT)?;
    let (n2, h, w, c) = (
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
    );
    if n2 != manifest.n || h != manifest.irt_h || w != manifest.irt_w || c != manifest.irt_c {
        return Err(r.fail(format!(
            "header {n2}×{h}×{w}×{c} disagrees with manifest {}×{}×{}×{}",
            manifest.n, manifest.irt_h, manifest.irt_w, manifest.irt_c
        )));
    }
    let hwc = r.f32s(n2 * h * w * c)?;
    r.done()?;
    let mut irt = vec![0.0f32; hwc.len()];
    let chw = c * h * w;
    for i in 0..n2 {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    irt[i * chw + (ch * h + y) * w + x] = hwc[i * chw + (y * w + x) * c + ch];
                }
            }
        }
    }

    let mut r = Reader::open(&dir.join("labels.bin"))?;
    r.magic(MAGIC_LABELS)?;
    let n3 = r.u32()? as usize;
    if n3 != manifest.n {
        return Err(r.fail(format!(
            "header count {n3} disagrees with manifest {}",
            manifest.n
        )));
    }
    let labels = r.take(n3)?.to_vec();
    r.done()?;
    for (i, &l) in labels.iter().enumerate() {
        if !(1..=3).contains(&l) {
            let mut probe = r;
            probe.pos = 12 + i;
            return Err(probe.fail(format!("label byte {l} outside {{1,2,3}}")));
        }
    }

    let ds = Dataset {
        gpr,
        irt,
        labels,
        manifest,
    };
    ds.check()?;
    Ok(ds)
}

fn write_entry(w: &mut Writer, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    w.u16(name.len() as u16);
    w.buf.extend_from_slice(name.as_bytes());
    w.u8(shape.len() as u8);
    for &e in shape {
        w.u32(e as u32);
    }
    w.f32s(data);
}

fn read_entry(r: &mut Reader) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let name_len = r.u16()? as usize;
    let name_bytes = r.take(name_len)?.to_vec();
    let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
        file: r.file.clone(),
        offset: r.pos as u64,
        msg: "entry name is not UTF-8".into(),
    })?;
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel = shape.iter().product::<usize>();
    let data = r.f32s(numel)?;
    Ok((name, shape, data))
}

/// Names under which batchnorm running moments travel inside the checkpoint.
fn running_stat_names(block: usize) -> (String, String) {
    (
        format!("irt.block{block}.bn.running_mean"),
        format!("irt.block{block}.bn.running_var"),
    )
}

/// Serialize model weights, batchnorm running moments, and (optionally)
/// optimizer moment buffers into one checkpoint file.
pub fn write_checkpoint(path: &Path, model: &Model<f32>, optimizer: Option<&AdamW>) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for (name, t) in &model.params {
        entries.push((name.clone(), t.shape().to_vec(), t.data().to_vec()));
    }
    for (b, bn) in model.bn.iter().enumerate() {
        let (mn, vn) = running_stat_names(b);
        entries.push((mn, vec![bn.mean.len()], bn.mean.clone()));
        entries.push((vn, vec![bn.var.len()], bn.var.clone()));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let mut w = Writer::new(MAGIC_MODEL);
    w.u32(entries.len() as u32);
    for (name, shape, data) in &entries {
        write_entry(&mut w, name, shape, data.iter().copied());
    }
    match optimizer {
        None => w.u8(0),
        Some(opt) => {
            w.u8(1);
            for buffers in [&opt.m, &opt.v] {
                w.u32(buffers.len() as u32);
                for (name, data) in buffers {
                    let shape = model
                        .params
                        .get(name)
                        .map(|t| t.shape().to_vec())
                        .unwrap_or_else(|| vec![data.len()]);
                    write_entry(&mut w, name, &shape, data.iter().map(|&v| v as f32));
                }
            }
        }
    }
    w.finish(path)
}

/// Optimizer moment buffers recovered from a checkpoint; step count lives in
/// the sidecar.
pub struct OptimizerBuffers {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Load a checkpoint written by [`write_checkpoint`], validating every entry
/// against the parameter inventory for `dims`.
pub fn read_checkpoint(
    path: &Path,
    dims: ModelDims,
) -> Result<(Model<f32>, Option<OptimizerBuffers>)> {
    dims.validate()?;
    let mut r = Reader::open(path)?;
    r.magic(MAGIC_MODEL)?;
    let count = r.u32()? as usize;
    let mut params: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut bn: [BnState<f32>; 3] = std::array::from_fn(|_| BnState::identity(1));
    let mut bn_seen = [[false; 2]; 3];
    for _ in 0..count {
        let (name, shape, data) = read_entry(&mut r)?;
        let mut matched = false;
        for b in 0..3 {
            let (mn, vn) = running_stat_names(b);
            let slot = if name == mn {
                Some(0)
            } else if name == vn {
                Some(1)
            } else {
                None
            };
            if let Some(s) = slot {
                if shape.len() != 1 || shape[0] != dims.irt_chans[b] {
                    return Err(r.fail(format!(
                        "{name} has shape {shape:?}, expected [{}]",
                        dims.irt_chans[b]
                    )));
                }
                if s == 0 {
                    bn[b].mean = data.clone();
                } else {
                    bn[b].var = data.clone();
                }
                bn_seen[b][s] = true;
                matched = true;
                break;
            }
        }
        if matched {
            continue;
        }
        if params.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(r.fail(format!("duplicate entry {name}")));
        }
    }

    for (b, seen) in bn_seen.iter().enumerate() {
        if !(seen[0] && seen[1]) {
            return Err(r.fail(format!("missing running moments for conv block {b}")));
        }
        // pad whichever half arrived first to a consistent state
        let c = dims.irt_chans[b];
        if bn[b].mean.len() != c || bn[b].var.len() != c {
            return Err(r.fail(format!("running moments for block {b} have wrong length")));
        }
    }

    let specs = param_specs(&dims);
    if params.len() != specs.len() {
        return Err(r.fail(format!(
            "checkpoint holds {} parameters, model wants {}",
            params.len(),
            specs.len()
        )));
    }
    for (name, shape, _) in &specs {
        match params.get(name) {
            None => return Err(r.fail(format!("missing parameter {name}"))),
            Some(t) if t.shape() != &shape[..] => {
                return Err(r.fail(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let mut out = [BTreeMap::new(), BTreeMap::new()];
            for buffers in &mut out {
                let k = r.u32()? as usize;
                for _ in 0..k {
                    let (name, shape, data) = read_entry(&mut r)?;
                    match params.get(&name) {
                        None => {
                            return Err(r.fail(format!("optimizer buffer {name} has no parameter")))
                        }
                        Some(t) if t.shape() != &shape[..] => {
                            return Err(r.fail(format!("optimizer buffer {name} shape mismatch")))
                        }
                        _ => {}
                    }
                    buffers.insert(name, data.into_iter().map(|v| v as f64).collect());
                }
            }
            let [m, v] = out;
            Some(OptimizerBuffers { m, v })
        }
        other => return Err(r.fail(format!("optimizer flag must be 0 or 1, got {other}"))),
    };
    r.done()?;

    Ok((Model { dims, params, bn }, optimizer))
}
