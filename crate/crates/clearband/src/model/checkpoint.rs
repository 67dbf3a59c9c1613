//! Self-describing binary snapshots of a model and its training state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "CBCK"
//! version u32      currently 1
//! config  u32 byte length, then UTF-8 "key=value\n" lines covering the
//!         architecture, framing, and element type
//! count   u32      number of blobs
//! blob*   u32 name length, name bytes,
//!         u8  tag: 0 = f32, 1 = f64, 2 = u64 counter,
//!         u32 rank, rank x u64 dimensions (rank 0 for counters),
//!         raw element data (4/8 bytes per element for tensors,
//!         8 bytes for a counter)
//! ```
//!
//! Blob names are namespaced: `param.*` and `buffer.*` are the model
//! parameters and normalization statistics and must all be present with
//! their exact shapes; any other tensor rides along in `extras` (the
//! trainer keeps optimizer moments there) and counters in `counters`.
//! Writing is deterministic: a load/save cycle reproduces the file byte for
//! byte, and values survive exactly in both element types.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dsp::stft::StftConfig;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

use super::{init_model, ModelBuffers, ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"CBCK";
const VERSION: u32 = 1;
const TAG_COUNTER: u8 = 2;

#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<S>>,
    pub buffers: ModelBuffers<S>,
    /// Extra tensors carried next to the model (optimizer moments and the
    /// like). Keys must not collide with the reserved namespaces.
    pub extras: BTreeMap<String, Tensor<S>>,
    pub counters: BTreeMap<String, u64>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(msg.into())
}

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn r_exact(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| bad(format!("unexpected end of file in {what}")))?;
    Ok(buf)
}

fn r_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let b = r_exact(r, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn r_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let b = r_exact(r, 8, what)?;
    Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
}

fn config_text(cfg: &ModelConfig, dtype: Dtype) -> String {
    let channels: Vec<String> = cfg.channels.iter().map(|c| c.to_string()).collect();
    format!(
        "bands={}\nnet_bins={}\nchannels={}\nkernel_t={}\nkernel_f={}\nstride_f={}\n\
         df_taps_time={}\ndf_taps_freq={}\nlookahead_frames={}\nf_hidden={}\nt_hidden={}\n\
         snr_hidden={}\nframe={}\nhop={}\nfft_size={}\ndtype={}\n",
        cfg.bands,
        cfg.net_bins,
        channels.join(","),
        cfg.kernel_t,
        cfg.kernel_f,
        cfg.stride_f,
        cfg.df_taps_time,
        cfg.df_taps_freq,
        cfg.lookahead_frames,
        cfg.f_hidden,
        cfg.t_hidden,
        cfg.snr_hidden,
        cfg.stft.frame,
        cfg.stft.hop,
        cfg.stft.fft_size,
        match dtype {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        },
    )
}

fn parse_config(text: &str) -> Result<(ModelConfig, Dtype)> {
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad config line: {line}")))?;
        if kv.insert(k.to_string(), v.to_string()).is_some() {
            return Err(bad(format!("duplicate config key: {k}")));
        }
    }
    let mut take = |k: &str| kv.remove(k).ok_or_else(|| bad(format!("missing config key: {k}")));
    let num = |v: String, k: &str| {
        v.parse::<usize>().map_err(|_| bad(format!("config key {k} is not a number: {v}")))
    };
    let bands = num(take("bands")?, "bands")?;
    let net_bins = num(take("net_bins")?, "net_bins")?;
    let channels = take("channels")?
        .split(',')
        .map(|c| c.parse::<usize>().map_err(|_| bad(format!("bad channel count: {c}"))))
        .collect::<Result<Vec<usize>>>()?;
    let kernel_t = num(take("kernel_t")?, "kernel_t")?;
    let kernel_f = num(take("kernel_f")?, "kernel_f")?;
    let stride_f = num(take("stride_f")?, "stride_f")?;
    let df_taps_time = num(take("df_taps_time")?, "df_taps_time")?;
    let df_taps_freq = num(take("df_taps_freq")?, "df_taps_freq")?;
    let lookahead_frames = num(take("lookahead_frames")?, "lookahead_frames")?;
    let f_hidden = num(take("f_hidden")?, "f_hidden")?;
    let t_hidden = num(take("t_hidden")?, "t_hidden")?;
    let snr_hidden = num(take("snr_hidden")?, "snr_hidden")?;
    let frame = num(take("frame")?, "frame")?;
    let hop = num(take("hop")?, "hop")?;
    let fft_size = num(take("fft_size")?, "fft_size")?;
    let dtype = match take("dtype")?.as_str() {
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => return Err(bad(format!("unknown dtype: {other}"))),
    };
    if let Some(k) = kv.into_keys().next() {
        return Err(bad(format!("unknown config key: {k}")));
    }
    let cfg = ModelConfig {
        bands,
        net_bins,
        channels,
        kernel_t,
        kernel_f,
        stride_f,
        df_taps_time,
        df_taps_freq,
        lookahead_frames,
        f_hidden,
        t_hidden,
        snr_hidden,
        stft: StftConfig { frame, hop, fft_size },
    };
    cfg.validate().map_err(|e| bad(format!("config does not describe a buildable model: {e}")))?;
    Ok((cfg, dtype))
}

fn write_tensor<S: Scalar>(w: &mut impl Write, name: &str, t: &Tensor<S>) -> Result<()> {
    w_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[S::DTYPE.byte()])?;
    w_u32(w, t.ndim() as u32)?;
    for &d in t.shape() {
        w_u64(w, d as u64)?;
    }
    match S::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v.into_f64() as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.into_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn write_counter(w: &mut impl Write, name: &str, v: u64) -> Result<()> {
    w_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[TAG_COUNTER])?;
    w_u32(w, 0)?;
    w_u64(w, v)
}

// first write failure sticks; traversal callbacks cannot return errors
fn emit<S: Scalar>(
    w: &mut impl Write,
    failed: &mut Option<Error>,
    name: String,
    t: &Tensor<S>,
) {
    if failed.is_none() {
        if let Err(e) = write_tensor(w, &name, t) {
            *failed = Some(e);
        }
    }
}

enum Blob<S> {
    Data(Tensor<S>),
    Counter(u64),
}

fn read_blob<S: Scalar>(r: &mut impl Read) -> Result<(String, Blob<S>)> {
    let name_len = r_u32(r, "blob name length")? as usize;
    if name_len > 4096 {
        return Err(bad(format!("unreasonable blob name length {name_len}")));
    }
    let name = String::from_utf8(r_exact(r, name_len, "blob name")?)
        .map_err(|_| bad("blob name is not UTF-8"))?;
    let tag = r_exact(r, 1, "blob tag")?[0];
    let rank = r_u32(r, "blob rank")? as usize;
    if rank > 8 {
        return Err(bad(format!("unreasonable rank {rank} for {name}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r_u64(r, "blob dimension")? as usize);
    }
    if tag == TAG_COUNTER {
        if rank != 0 {
            return Err(bad(format!("counter {name} must be rank 0")));
        }
        return Ok((name, Blob::Counter(r_u64(r, "counter value")?)));
    }
    let dtype = Dtype::from_byte(tag).ok_or_else(|| bad(format!("unknown tag {tag} for {name}")))?;
    if dtype != S::DTYPE {
        return Err(bad(format!(
            "blob {name} holds {dtype:?} but this model was opened as {:?}",
            S::DTYPE
        )));
    }
    let count: usize = shape.iter().product();
    if count > (1 << 31) {
        return Err(bad(format!("unreasonable element count for {name}")));
    }
    let data = match dtype {
        Dtype::F32 => {
            let raw = r_exact(r, count * 4, "tensor data")?;
            raw.chunks_exact(4)
                .map(|b| S::of_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect()
        }
        Dtype::F64 => {
            let raw = r_exact(r, count * 8, "tensor data")?;
            raw.chunks_exact(8)
                .map(|b| {
                    S::of_f64(f64::from_le_bytes([
                        b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
                    ]))
                })
                .collect()
        }
    };
    Ok((name, Blob::Data(Tensor::new(shape, data))))
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(
        config: ModelConfig,
        params: ModelParams<Tensor<S>>,
        buffers: ModelBuffers<S>,
    ) -> Self {
        Checkpoint { config, params, buffers, extras: BTreeMap::new(), counters: BTreeMap::new() }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        for k in self.extras.keys() {
            if k.starts_with("param.") || k.starts_with("buffer.") {
                return Err(bad(format!("extra blob {k} collides with a reserved namespace")));
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w_u32(&mut w, VERSION)?;
        let cfg = config_text(&self.config, S::DTYPE);
        w_u32(&mut w, cfg.len() as u32)?;
        w.write_all(cfg.as_bytes())?;

        let mut n_model = 0usize;
        self.params.for_each(&mut |_, _| n_model += 1);
        self.buffers.for_each(&mut |_, _| n_model += 1);
        w_u32(&mut w, (n_model + self.extras.len() + self.counters.len()) as u32)?;

        let mut failed: Option<Error> = None;
        self.params.for_each(&mut |n, t| emit(&mut w, &mut failed, format!("param.{n}"), t));
        self.buffers.for_each(&mut |n, t| emit(&mut w, &mut failed, format!("buffer.{n}"), t));
        if let Some(e) = failed {
            return Err(e);
        }
        for (n, t) in &self.extras {
            write_tensor(&mut w, n, t)?;
        }
        for (n, v) in &self.counters {
            write_counter(&mut w, n, *v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let magic = r_exact(&mut r, 4, "magic")?;
        if magic != MAGIC {
            return Err(bad("not a model snapshot (bad magic)"));
        }
        let version = r_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(bad(format!("unsupported snapshot version {version}")));
        }
        let cfg_len = r_u32(&mut r, "config length")? as usize;
        if cfg_len > 1 << 20 {
            return Err(bad("unreasonable config length"));
        }
        let text = String::from_utf8(r_exact(&mut r, cfg_len, "config text")?)
            .map_err(|_| bad("config text is not UTF-8"))?;
        let (config, dtype) = parse_config(&text)?;
        if dtype != S::DTYPE {
            return Err(bad(format!(
                "snapshot holds {dtype:?} but was opened as {:?}",
                S::DTYPE
            )));
        }

        let count = r_u32(&mut r, "blob count")? as usize;
        let mut tensors: BTreeMap<String, Tensor<S>> = BTreeMap::new();
        let mut counters: BTreeMap<String, u64> = BTreeMap::new();
        for _ in 0..count {
            let (name, blob) = read_blob::<S>(&mut r)?;
            let clash = match blob {
                Blob::Data(t) => tensors.insert(name.clone(), t).is_some(),
                Blob::Counter(v) => counters.insert(name.clone(), v).is_some(),
            };
            if clash {
                return Err(bad(format!("duplicate blob {name}")));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after the last blob"));
        }

        // template gives the expected tree and shapes; values are replaced
        let (template, mut buffers) = init_model::<S>(&config, 0);
        let mut problem: Option<String> = None;
        let params = template.map(&mut |name, t| {
            let key = format!("param.{name}");
            match tensors.remove(&key) {
                Some(loaded) if loaded.shape() == t.shape() => loaded,
                Some(loaded) => {
                    problem.get_or_insert(format!(
                        "param {name} has shape {:?}, expected {:?}",
                        loaded.shape(),
                        t.shape()
                    ));
                    t.clone()
                }
                None => {
                    problem.get_or_insert(format!("missing param {name}"));
                    t.clone()
                }
            }
        });
        buffers.for_each_mut(&mut |name, t| {
            let key = format!("buffer.{name}");
            match tensors.remove(&key) {
                Some(loaded) if loaded.shape() == t.shape() => *t = loaded,
                Some(loaded) => {
                    problem.get_or_insert(format!(
                        "buffer {name} has shape {:?}, expected {:?}",
                        loaded.shape(),
                        t.shape()
                    ));
                }
                None => {
                    problem.get_or_insert(format!("missing buffer {name}"));
                }
            }
        });
        if let Some(p) = problem {
            return Err(bad(p));
        }
        Ok(Checkpoint { config, params, buffers, extras: tensors, counters })
    }
}
