//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian): magic `INFNETCK`, `u32` version,
//! schema, model config, training config, named tensors as raw `f64`,
//! optimizer state, counters, history, then a CRC-32 of everything before.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{DataSchema, FeatureSchema};
use crate::model::{Ablation, InfNet, ModelConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{HistoryRow, TrainConfig};

pub const MAGIC: &[u8; 8] = b"INFNETCK";
pub const VERSION: u32 = 1;

/// Everything needed to evaluate a model or continue training it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: InfNet<f64>,
    pub train: TrainConfig,
    pub optimizer: Optimizer<f64>,
    /// Completed epochs.
    pub epoch: usize,
    /// Best mean validation AUC seen so far.
    pub best_metric: f64,
    /// Consecutive non-improving evaluations.
    pub stale: usize,
    pub history: Vec<HistoryRow>,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn usize(&mut self, x: usize) {
        self.u64(x as u64);
    }

    fn f64(&mut self, x: f64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn usizes(&mut self, xs: &[usize]) {
        self.usize(xs.len());
        xs.iter().for_each(|&x| self.usize(x));
    }

    fn f64s(&mut self, xs: &[f64]) {
        self.usize(xs.len());
        xs.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflows usize"))
    }

    /// A length prefix that cannot exceed the remaining bytes.
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(corrupt(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8 string"))
    }

    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);

    let fs = ck.model.schema();
    w.usizes(&fs.data.cards);
    w.usizes(&fs.data.lens);
    w.usizes(&fs.data.vocabs);
    w.usize(fs.data.tasks);
    w.usize(fs.d);
    w.usize(fs.cat_proxies);
    w.usize(fs.shared_task_tokens);

    let mc = ck.model.config();
    w.usize(mc.blocks);
    w.usize(mc.heads);
    w.usize(mc.d_k.unwrap_or(0));
    w.str(mc.ablation.as_str());

    let tc = &ck.train;
    w.usize(tc.batch_size);
    w.f64(tc.learning_rate);
    w.str(&tc.optimizer.to_string());
    w.f64(tc.l2_weight);
    w.f64(tc.dropout);
    w.usize(tc.patience);
    w.usize(tc.max_epochs);
    w.u64(tc.seed);
    w.f64(tc.grad_clip);
    match &tc.task_weights {
        Some(v) => {
            w.u32(1);
            w.f64s(v);
        }
        None => w.u32(0),
    }

    let params = ck.model.params();
    w.usize(params.len());
    for (name, t) in params.iter() {
        w.str(name);
        w.usizes(t.shape());
        t.data().iter().for_each(|&x| w.f64(x));
    }

    let opt = &ck.optimizer;
    w.str(&opt.kind.to_string());
    w.f64(opt.lr);
    w.u64(opt.step);
    for moments in [&opt.first, &opt.second] {
        w.usize(moments.len());
        moments.iter().for_each(|m| w.f64s(m));
    }

    w.usize(ck.epoch);
    w.f64(ck.best_metric);
    w.usize(ck.stale);
    w.usize(ck.history.len());
    for r in &ck.history {
        w.u64(r.step);
        w.f64(r.loss);
        w.f64s(&r.auc);
        w.f64s(&r.gauc);
    }

    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("missing magic header"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let mut r = Reader { buf: body, pos: 12 };

    let data = DataSchema {
        cards: r.usizes()?,
        lens: r.usizes()?,
        vocabs: r.usizes()?,
        tasks: r.usize()?,
    };
    let schema = FeatureSchema {
        data,
        d: r.usize()?,
        cat_proxies: r.usize()?,
        shared_task_tokens: r.usize()?,
    };
    let blocks = r.usize()?;
    let heads = r.usize()?;
    let d_k = Some(r.usize()?).filter(|&k| k > 0);
    let ablation: Ablation = r
        .str()?
        .parse()
        .map_err(|_| corrupt("unknown ablation mode"))?;
    let config = ModelConfig {
        blocks,
        heads,
        d_k,
        ablation,
    };

    let train = TrainConfig {
        batch_size: r.usize()?,
        learning_rate: r.f64()?,
        optimizer: r.str()?.parse().map_err(|_| corrupt("unknown optimizer"))?,
        l2_weight: r.f64()?,
        dropout: r.f64()?,
        patience: r.usize()?,
        max_epochs: r.usize()?,
        seed: r.u64()?,
        grad_clip: r.f64()?,
        task_weights: match r.u32()? {
            0 => None,
            1 => Some(r.f64s()?),
            _ => return Err(corrupt("bad task-weight flag")),
        },
    };

    let mut loaded = ParamStore::new();
    let n = r.len(1)?;
    for _ in 0..n {
        let name = r.str()?;
        let shape = r.usizes()?;
        let count = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let count = count.ok_or_else(|| corrupt("tensor size overflows"))?;
        if count.saturating_mul(8) > r.buf.len() - r.pos {
            return Err(corrupt(format!("tensor `{name}` exceeds remaining data")));
        }
        let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t =
            Tensor::new(&shape, values).map_err(|e| corrupt(format!("tensor `{name}`: {e}")))?;
        loaded.add(name, t);
    }

    // Rebuild the architecture from the embedded schema and check every
    // stored tensor against it.
    let mut model =
        InfNet::new(schema, config, 0).map_err(|e| corrupt(format!("embedded schema: {e}")))?;
    for id in model.params().ids().collect::<Vec<_>>() {
        let name = model.params().name(id).to_string();
        let src = loaded
            .find(&name)
            .ok_or_else(|| corrupt(format!("missing tensor `{name}`")))?;
        let src = loaded.get(src);
        let dst = model.params_mut().get_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::CheckpointShape {
                name,
                found: src.shape().to_vec(),
                expected: dst.shape().to_vec(),
            });
        }
        *dst = src.clone();
    }
    if loaded.len() != model.params().len() {
        return Err(corrupt(
            "checkpoint holds tensors the model does not define",
        ));
    }

    let kind: OptimizerKind = r.str()?.parse().map_err(|_| corrupt("unknown optimizer"))?;
    let lr = r.f64()?;
    let step = r.u64()?;
    let mut moments = Vec::with_capacity(2);
    for _ in 0..2 {
        let k = r.len(8)?;
        moments.push((0..k).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?);
    }
    let second = moments.pop().unwrap();
    let first = moments.pop().unwrap();
    let sizes: Vec<usize> = model.params().tensors().iter().map(Tensor::len).collect();
    let fits = |m: &Vec<Vec<f64>>| {
        m.len() == sizes.len() && m.iter().zip(&sizes).all(|(v, &s)| v.len() == s)
    };
    if !fits(&second) || (kind == OptimizerKind::Adam && !fits(&first)) {
        return Err(corrupt("optimizer state does not match parameters"));
    }
    let optimizer = Optimizer {
        kind,
        lr,
        step,
        first,
        second,
    };

    let epoch = r.usize()?;
    let best_metric = r.f64()?;
    let stale = r.usize()?;
    let rows = r.len(8)?;
    let history = (0..rows)
        .map(|_| {
            Ok(HistoryRow {
                step: r.u64()?,
                loss: r.f64()?,
                auc: r.f64s()?,
                gauc: r.f64s()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes before checksum"));
    }
    Ok(Checkpoint {
        model,
        train,
        optimizer,
        epoch,
        best_metric,
        stale,
        history,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
