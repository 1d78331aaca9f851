//! Checkpoint files: an ASCII manifest followed by a little-endian binary payload.
//!
//! ```text
//! repr-checkpoint 1
//! epoch 40
//! optimizer adam
//! array conv0.weight f64 8x3x3x3 1c9d3e7a5b0f2a11
//! ...
//! end
//! <payload: arrays in manifest order>
//! ```
//!
//! Each `array` line carries a name, element type, shape and an FNV-1a checksum of the
//! array's bytes, so corruption is reported against the array it hit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Model, PruneMask};
use crate::optim::Optimizer;
use crate::scheduler::{CycleState, TrainConfig, TrainState};

const MAGIC: &str = "repr-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::U64(_) => "u64",
            ArrayData::U8(_) => "u8",
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U8(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// A parsed checkpoint: header fields plus named arrays in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub optimizer: String,
    pub arrays: Vec<Array>,
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::format("checkpoint", 0, format!("missing array '{name}'")))
    }

    fn f64s(&self, name: &str, len: usize) -> Result<&[f64]> {
        match &self.get(name)?.data {
            ArrayData::F64(v) if v.len() == len => Ok(v),
            ArrayData::F64(v) => Err(Error::format(
                "checkpoint",
                0,
                format!("array '{name}' has {} elements, model needs {len}", v.len()),
            )),
            _ => Err(Error::format("checkpoint", 0, format!("array '{name}' is not f64"))),
        }
    }

    fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.get(name)?.data {
            ArrayData::U64(v) => Ok(v),
            _ => Err(Error::format("checkpoint", 0, format!("array '{name}' is not u64"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC} {VERSION}\nepoch {}\noptimizer {}\n", self.epoch, self.optimizer);
        let payloads: Vec<Vec<u8>> = self.arrays.iter().map(|a| a.data.to_bytes()).collect();
        for (a, p) in self.arrays.iter().zip(&payloads) {
            head.push_str(&format!(
                "array {} {} {} {:016x}\n",
                a.name,
                a.data.dtype(),
                shape_str(&a.shape),
                fnv(p)
            ));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for p in payloads {
            out.extend(p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let what = "checkpoint";
        let end = bytes
            .windows(5)
            .position(|w| w == b"\nend\n")
            .map(|p| p + 1)
            .ok_or_else(|| Error::format(what, 0, "manifest has no 'end' line"))?;
        let head = std::str::from_utf8(&bytes[..end])
            .map_err(|e| Error::format(what, e.valid_up_to() as u64, "manifest is not ASCII"))?;
        let mut at_line = Vec::new();
        let mut offset = 0u64;
        for l in head.lines() {
            at_line.push((l, offset));
            offset += l.len() as u64 + 1;
        }
        let mut lines = at_line.into_iter();
        fn next<'a>(lines: &mut std::vec::IntoIter<(&'a str, u64)>, end: u64) -> (Option<&'a str>, u64) {
            match lines.next() {
                Some((l, at)) => (Some(l), at),
                None => (None, end),
            }
        }
        let (first, _) = next(&mut lines, offset);
        match first.and_then(|l| l.split_once(' ')) {
            Some((MAGIC, v)) if v == VERSION.to_string() => {}
            Some((MAGIC, v)) => return Err(Error::format(what, 0, format!("unsupported version {v}"))),
            _ => return Err(Error::format(what, 0, "not a checkpoint file")),
        }
        let (l, at) = next(&mut lines, offset);
        let epoch = l
            .and_then(|l| l.strip_prefix("epoch "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(what, at, "expected 'epoch <n>'"))?;
        let (l, at) = next(&mut lines, offset);
        let optimizer = l
            .and_then(|l| l.strip_prefix("optimizer "))
            .ok_or_else(|| Error::format(what, at, "expected 'optimizer <rule>'"))?
            .to_string();

        let mut specs = Vec::new();
        loop {
            let (l, at) = next(&mut lines, offset);
            let Some(l) = l else { break };
            let parts: Vec<&str> = l.split(' ').collect();
            if parts.len() != 5 || parts[0] != "array" {
                return Err(Error::format(what, at, format!("bad manifest line '{l}'")));
            }
            let shape: Vec<usize> = parts[3]
                .split('x')
                .map(|d| d.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(what, at, format!("bad shape '{}' for '{}'", parts[3], parts[1])))?;
            let sum = u64::from_str_radix(parts[4], 16)
                .map_err(|_| Error::format(what, at, format!("bad checksum for '{}'", parts[1])))?;
            let width = match parts[2] {
                "f64" | "u64" => 8,
                "u8" => 1,
                d => return Err(Error::format(what, at, format!("unknown dtype '{d}' for '{}'", parts[1]))),
            };
            specs.push((parts[1].to_string(), parts[2].to_string(), shape, sum, width));
        }

        let mut pos = end + 4;
        let mut arrays = Vec::with_capacity(specs.len());
        for (name, dtype, shape, sum, width) in specs {
            let n: usize = shape.iter().product();
            let raw = bytes.get(pos..pos + n * width).ok_or_else(|| {
                Error::format(
                    what,
                    pos as u64,
                    format!("payload of '{name}' truncated: needs {} bytes, {} left", n * width, bytes.len().saturating_sub(pos)),
                )
            })?;
            if fnv(raw) != sum {
                return Err(Error::format(what, pos as u64, format!("checksum mismatch in array '{name}'")));
            }
            let data = match dtype.as_str() {
                "f64" => ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
                "u64" => ArrayData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
                _ => ArrayData::U8(raw.to_vec()),
            };
            pos += n * width;
            arrays.push(Array { name, shape, data });
        }
        if pos != bytes.len() {
            return Err(Error::format(what, pos as u64, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            epoch,
            optimizer,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Captures everything needed to resume `state`.
    pub fn capture(state: &TrainState) -> Checkpoint {
        let model = &state.model;
        let mut arrays = Vec::new();
        let f64a = |name: String, shape: &[usize], v: &[f64]| Array {
            name,
            shape: shape.to_vec(),
            data: ArrayData::F64(v.to_vec()),
        };
        for (kind, t) in model.param_kinds().into_iter().zip(model.parameters()) {
            arrays.push(f64a(kind.name(), t.shape(), t.data()));
        }
        for (l, layer) in model.conv.iter().enumerate() {
            if let Some(bn) = &layer.bn {
                arrays.push(f64a(format!("conv{l}.bn.running_mean"), bn.running_mean.shape(), bn.running_mean.data()));
                arrays.push(f64a(format!("conv{l}.bn.running_var"), bn.running_var.shape(), bn.running_var.data()));
            }
        }
        for (kind, slot) in state.optimizer.kinds().iter().zip(&state.optimizer.slots) {
            let n = kind.name();
            if !slot.first.is_empty() {
                arrays.push(f64a(format!("opt.{n}.first"), &[slot.first.len()], &slot.first));
            }
            if !slot.second.is_empty() {
                arrays.push(f64a(format!("opt.{n}.second"), &[slot.second.len()], &slot.second));
            }
            if !slot.steps.is_empty() {
                arrays.push(Array {
                    name: format!("opt.{n}.steps"),
                    shape: vec![slot.steps.len()],
                    data: ArrayData::U64(slot.steps.clone()),
                });
            }
        }
        for (l, live) in state.mask.layers().iter().enumerate() {
            arrays.push(Array {
                name: format!("mask.conv{l}"),
                shape: vec![live.len()],
                data: ArrayData::U8(live.iter().map(|&b| u8::from(b)).collect()),
            });
        }
        let dropped: Vec<u64> = state.cycle.dropped.iter().flat_map(|&(l, f)| [l as u64, f as u64]).collect();
        arrays.push(Array {
            name: "cycle.dropped".into(),
            shape: vec![state.cycle.dropped.len(), 2],
            data: ArrayData::U64(dropped),
        });
        let pending: Vec<u64> = state
            .cycle
            .pending
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.iter().flat_map(move |&(l, f)| [i as u64, l as u64, f as u64]))
            .collect();
        arrays.push(Array {
            name: "cycle.pending".into(),
            shape: vec![pending.len() / 3, 3],
            data: ArrayData::U64(pending),
        });
        Checkpoint {
            epoch: state.epoch,
            optimizer: state.optimizer.rule.name().into(),
            arrays,
        }
    }

    /// Model weights only, into a model built from `cfg`.
    pub fn restore_model(&self, cfg: &TrainConfig) -> Result<Model> {
        let mut model = Model::init(&cfg.model, &mut crate::seed::stream(0, "checkpoint", 0, 0))?;
        let kinds = model.param_kinds();
        for (kind, t) in kinds.into_iter().zip(model.parameters_mut()) {
            let v = self.f64s(&kind.name(), t.len())?;
            t.data_mut().copy_from_slice(v);
        }
        for (l, layer) in model.conv.iter_mut().enumerate() {
            if let Some(bn) = layer.bn.as_mut() {
                let j = bn.running_mean.len();
                bn.running_mean.data_mut().copy_from_slice(self.f64s(&format!("conv{l}.bn.running_mean"), j)?);
                bn.running_var.data_mut().copy_from_slice(self.f64s(&format!("conv{l}.bn.running_var"), j)?);
            }
        }
        model.validate()?;
        Ok(model)
    }

    /// Full training state for resuming under `cfg`.
    pub fn restore(&self, cfg: &TrainConfig) -> Result<TrainState> {
        if self.optimizer != cfg.rule.name() {
            return Err(Error::Config(format!(
                "checkpoint was written with optimizer '{}', config uses '{}'",
                self.optimizer,
                cfg.rule.name()
            )));
        }
        let model = self.restore_model(cfg)?;
        let mut optimizer = Optimizer::new(cfg.rule, &model);
        let kinds = optimizer.kinds().to_vec();
        for (kind, slot) in kinds.iter().zip(optimizer.slots.iter_mut()) {
            let n = kind.name();
            if !slot.first.is_empty() {
                let len = slot.first.len();
                slot.first.copy_from_slice(self.f64s(&format!("opt.{n}.first"), len)?);
            }
            if !slot.second.is_empty() {
                let len = slot.second.len();
                slot.second.copy_from_slice(self.f64s(&format!("opt.{n}.second"), len)?);
            }
            if !slot.steps.is_empty() {
                let s = self.u64s(&format!("opt.{n}.steps"))?;
                if s.len() != slot.steps.len() {
                    return Err(Error::format("checkpoint", 0, format!("array 'opt.{n}.steps' has wrong length")));
                }
                slot.steps.copy_from_slice(s);
            }
        }
        let mut layers = Vec::with_capacity(model.conv.len());
        for (l, layer) in model.conv.iter().enumerate() {
            let name = format!("mask.conv{l}");
            match &self.get(&name)?.data {
                ArrayData::U8(v) if v.len() == layer.filters() && v.iter().all(|&b| b <= 1) => {
                    layers.push(v.iter().map(|&b| b == 1).collect())
                }
                _ => return Err(Error::format("checkpoint", 0, format!("array '{name}' is not a valid mask"))),
            }
        }
        let mask = PruneMask::from_layers(layers)?;
        let pair = |v: &[u64]| (v[0] as usize, v[1] as usize);
        let dropped = self.u64s("cycle.dropped")?.chunks_exact(2).map(pair).collect();
        let mut pending: Vec<Vec<(usize, usize)>> = Vec::new();
        for t in self.u64s("cycle.pending")?.chunks_exact(3) {
            let i = t[0] as usize;
            if pending.len() <= i {
                pending.resize(i + 1, Vec::new());
            }
            pending[i].push(pair(&t[1..]));
        }
        TrainState::from_parts(model, optimizer, mask, CycleState { dropped, pending }, self.epoch)
    }
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    Checkpoint::capture(state).write(path)
}

pub fn load(cfg: &TrainConfig, path: &Path) -> Result<TrainState> {
    Checkpoint::read(path)?.restore(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelSpec;
    use crate::optim::{LrSchedule, Rule};
    use crate::scheduler::ReprSchedule;

    fn cfg() -> TrainConfig {
        TrainConfig {
            model: ModelSpec {
                input_channels: 2,
                height: 4,
                width: 4,
                layers: 2,
                filters: 3,
                kernel: 3,
                num_classes: 4,
                batch_norm: true,
                conv_bias: false,
                dropout: 0.0,
            },
            rule: Rule::adam(),
            lr: LrSchedule::Fixed(0.01),
            batch_size: 4,
            epochs: 2,
            seed: 11,
            augment: false,
            eval_chunk: 4,
            schedule: ReprSchedule::default(),
        }
    }

    fn state() -> TrainState {
        let mut s = TrainState::new(&cfg()).unwrap();
        s.optimizer.slots[0].first[3] = 0.25;
        s.optimizer.slots[0].steps[3] = 7;
        s.mask.kill(1, 2).unwrap();
        s.cycle.dropped = vec![(1, 2), (0, 0)];
        s.cycle.pending = vec![vec![(0, 0)]];
        s.epoch = 5;
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = Checkpoint::capture(&state()).to_bytes();
        let restored = Checkpoint::from_bytes(&bytes).unwrap().restore(&cfg()).unwrap();
        assert_eq!(restored.epoch, 5);
        assert_eq!(restored.cycle.dropped, vec![(1, 2), (0, 0)]);
        assert!(!restored.mask.is_live(1, 2));
        assert_eq!(Checkpoint::capture(&restored).to_bytes(), bytes);
    }

    #[test]
    fn corruption_names_the_array() {
        let ck = Checkpoint::capture(&state());
        let mut bytes = ck.to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("checksum mismatch in array 'cycle.pending'"), "{err}");
        let good = ck.to_bytes();
        let err = Checkpoint::from_bytes(&good[..good.len() - 10]).unwrap_err().to_string();
        assert!(err.contains("payload of 'cycle.pending' truncated"), "{err}");
        assert!(Checkpoint::from_bytes(b"hello\nend\n").is_err());
    }

    #[test]
    fn optimizer_mismatch_is_rejected() {
        let ck = Checkpoint::capture(&state());
        let mut other = cfg();
        other.rule = Rule::Sgd;
        assert!(ck.restore(&other).is_err());
    }
}
