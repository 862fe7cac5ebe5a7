//! Compiled program: per-dispatcher instruction streams, initial data and DMA
//! descriptors, I/O bindings, the routine registry, and the buffer and
//! counter maps. Serialized as one record per line.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::fabric::{DmaDescriptor, FabricError};
use crate::funits::{Routine, RoutineRegistry};
use crate::isa::{IsaError, TpbInstruction, Unit};
use crate::machine::{AddressSpace, DataType, MachineConfig, ModelError, TensorDesc};
use crate::sync::CounterRef;
use crate::text::{join, parse_list, parse_u64, Line, Record};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgramError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid program: {0}")]
    Invalid(String),
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoBinding {
    pub name: String,
    pub desc: TensorDesc,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataInit {
    pub space: AddressSpace,
    pub addr: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferEntry {
    pub name: String,
    pub space: AddressSpace,
    pub base: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterEntry {
    pub name: String,
    pub counter: CounterRef,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScheduledProgram {
    pub name: String,
    pub routines: RoutineRegistry,
    pub inputs: Vec<IoBinding>,
    pub outputs: Vec<IoBinding>,
    pub data: Vec<DataInit>,
    pub dmas: Vec<DmaDescriptor>,
    pub streams: Vec<Vec<TpbInstruction>>,
    pub buffers: Vec<BufferEntry>,
    pub counters: Vec<CounterEntry>,
}

impl ScheduledProgram {
    pub fn instruction_count(&self) -> usize {
        self.streams.iter().map(Vec::len).sum()
    }

    pub fn validate(&self, cfg: &MachineConfig) -> Result<(), ProgramError> {
        let bad = |m: String| Err(ProgramError::Invalid(m));
        if self.streams.len() > cfg.dispatcher_contexts as usize {
            return bad(format!(
                "{} instruction streams for {} dispatcher contexts",
                self.streams.len(),
                cfg.dispatcher_contexts
            ));
        }
        for i in self.streams.iter().flatten() {
            i.validate(cfg)?;
            if let crate::isa::OpDescriptor::Csu(call) = &i.op {
                self.routines
                    .get(&call.routine)
                    .map_err(|e| ProgramError::Invalid(format!("seq {}: {e}", i.seq)))?;
            }
        }
        for d in &self.dmas {
            d.validate(cfg)?;
        }
        for d in &self.data {
            let end = d.addr.checked_add(d.bytes.len() as u64);
            if !d.space.is_valid(cfg) || end.is_none_or(|e| e > d.space.capacity(cfg)) {
                return bad(format!("data block at {}:{:#x} out of range", d.space, d.addr));
            }
        }
        for io in self.inputs.iter().chain(&self.outputs) {
            if !io.desc.fits(cfg) {
                return bad(format!("tensor `{}` does not fit its space", io.name));
            }
        }
        let mut names: Vec<&str> = self.inputs.iter().chain(&self.outputs).map(|b| b.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate input/output name".into());
        }
        Ok(())
    }

    /// Per (TPB, unit), sequence numbers in stream order must count up from
    /// zero without gaps.
    pub fn check_sequence_numbers(&self) -> Result<(), ProgramError> {
        let mut next: BTreeMap<(u32, Unit), u32> = BTreeMap::new();
        for i in self.streams.iter().flatten() {
            for g in i.tpb_mask.iter() {
                let n = next.entry((g, i.unit)).or_insert(0);
                if i.seq != *n {
                    return Err(ProgramError::Invalid(format!(
                        "TPB {g} {}: expected seq {}, found {}",
                        i.unit, n, i.seq
                    )));
                }
                *n += 1;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", Line::new("program").kv("name", &self.name).kv("dispatchers", self.streams.len()).finish());
        for r in self.routines.iter() {
            let l = Line::new("routine").kv("name", &r.name).kv("cost", r.cost).kv("behavior", r.behavior);
            let _ = writeln!(s, "{}", l.finish());
        }
        for (kind, list) in [("input", &self.inputs), ("output", &self.outputs)] {
            for b in list {
                let _ = writeln!(s, "{}", tensor_line(kind, &b.name, &b.desc));
            }
        }
        for d in &self.data {
            let l = Line::new("data")
                .kv("space", d.space)
                .kv("addr", format!("0x{:x}", d.addr))
                .kv("hex", hex::encode(&d.bytes));
            let _ = writeln!(s, "{}", l.finish());
        }
        for b in &self.buffers {
            let l = Line::new("buffer")
                .kv("name", &b.name)
                .kv("space", b.space)
                .kv("base", format!("0x{:x}", b.base))
                .kv("bytes", b.bytes);
            let _ = writeln!(s, "{}", l.finish());
        }
        for c in &self.counters {
            let _ = writeln!(s, "{}", Line::new("counter").kv("name", &c.name).kv("ref", c.counter).finish());
        }
        for d in &self.dmas {
            let _ = writeln!(s, "{}", d.to_record());
        }
        for (di, stream) in self.streams.iter().enumerate() {
            for i in stream {
                let _ = writeln!(s, "{}", i.to_record(di as u32));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ProgramError> {
        let mut p = ScheduledProgram::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let Some(r) = Record::parse(raw) else { continue };
            let err = |msg: String| ProgramError::Parse { line, msg };
            match r.kind.as_str() {
                "program" => {
                    p.name = r.get("name").unwrap_or_default().to_string();
                    let d: usize = r.parse_opt("dispatchers").map_err(err)?.unwrap_or(0);
                    p.streams.resize(d.max(p.streams.len()), Vec::new());
                }
                "routine" => p.routines.register(Routine {
                    name: r.req("name").map_err(err)?.to_string(),
                    cost: r.parse_req("cost").map_err(err)?,
                    behavior: r.req("behavior").map_err(err)?.parse().map_err(|e| err(format!("{e}")))?,
                }),
                "input" | "output" => {
                    let b = parse_tensor(&r).map_err(err)?;
                    if r.kind == "input" {
                        p.inputs.push(b);
                    } else {
                        p.outputs.push(b);
                    }
                }
                "data" => p.data.push(DataInit {
                    space: r.parse_req("space").map_err(err)?,
                    addr: parse_u64(r.req("addr").map_err(err)?).map_err(err)?,
                    bytes: hex::decode(r.req("hex").map_err(err)?).map_err(|e| err(e.to_string()))?,
                }),
                "buffer" => p.buffers.push(BufferEntry {
                    name: r.req("name").map_err(err)?.to_string(),
                    space: r.parse_req("space").map_err(err)?,
                    base: parse_u64(r.req("base").map_err(err)?).map_err(err)?,
                    bytes: r.parse_req("bytes").map_err(err)?,
                }),
                "counter" => p.counters.push(CounterEntry {
                    name: r.req("name").map_err(err)?.to_string(),
                    counter: r.parse_req("ref").map_err(err)?,
                }),
                "dma" => p.dmas.push(DmaDescriptor::from_record(&r).map_err(|e| err(e.to_string()))?),
                "instr" => {
                    let (d, i) = TpbInstruction::from_record(&r).map_err(|e| err(e.to_string()))?;
                    let d = d as usize;
                    if p.streams.len() <= d {
                        p.streams.resize(d + 1, Vec::new());
                    }
                    p.streams[d].push(i);
                }
                other => return Err(err(format!("unknown record `{other}`"))),
            }
        }
        Ok(p)
    }
}

fn tensor_line(kind: &str, name: &str, d: &TensorDesc) -> String {
    Line::new(kind)
        .kv("name", name)
        .kv("dtype", d.dtype)
        .kv("shape", join(&d.shape, "x"))
        .kv("strides", join(&d.strides, "x"))
        .kv("space", d.space)
        .kv("base", format!("0x{:x}", d.base))
        .finish()
}

fn parse_tensor(r: &Record) -> Result<IoBinding, String> {
    let shape: Vec<usize> = parse_list(r.req("shape")?, 'x')?;
    let dtype: DataType = r.parse_req("dtype")?;
    let space: AddressSpace = r.parse_req("space")?;
    let base = parse_u64(r.req("base")?)?;
    let desc = match r.get("strides") {
        Some(s) => TensorDesc::new(shape, parse_list(s, 'x')?, dtype, space, base),
        None => TensorDesc::dense(shape, dtype, space, base),
    }
    .map_err(|e| e.to_string())?;
    Ok(IoBinding { name: r.req("name")?.to_string(), desc })
}
