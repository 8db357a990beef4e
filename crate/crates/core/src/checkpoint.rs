//! Binary checkpoint codec.
//!
//! A checkpoint is the magic `ENSBCCKP`, a little-endian `u32` format
//! version, then a sequence of length-prefixed fields written by the agents.
//! All floats are stored as raw bits so round trips are exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::agent::{Agent, AgentKind, AnyAgent};
use crate::critic::CriticEnsemble;
use crate::data::StateNormalizer;
use crate::error::{Error, Result};
use crate::nn::{AdamState, Architecture, Mlp, OutputActivation};
use crate::sac::SacBcnAgent;
use crate::td3::Td3BcnAgent;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ENSBCCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub struct Encoder<'a> {
    out: &'a mut dyn Write,
}

impl<'a> Encoder<'a> {
    pub fn new(out: &'a mut dyn Write) -> Self {
        Self { out }
    }

    pub fn header(&mut self, kind: AgentKind) -> Result<()> {
        self.out.write_all(CHECKPOINT_MAGIC)?;
        self.u32(CHECKPOINT_VERSION)?;
        self.str(kind.as_str())
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.out.write_all(&[v])?)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.out.write_all(&v.to_le_bytes())?)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.out.write_all(&v.to_le_bytes())?)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.u64(v.to_bits())
    }

    pub fn f64s(&mut self, v: &[f64]) -> Result<()> {
        self.u64(v.len() as u64)?;
        for x in v {
            self.f64(*x)?;
        }
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u64(s.len() as u64)?;
        Ok(self.out.write_all(s.as_bytes())?)
    }

    pub fn mlp(&mut self, m: &Mlp) -> Result<()> {
        let widths = m.arch().widths();
        self.u64(widths.len() as u64)?;
        for w in widths {
            self.u64(*w as u64)?;
        }
        self.u8(m.arch().output_activation().tag())?;
        self.f64s(m.params())
    }

    pub fn adam(&mut self, a: &AdamState) -> Result<()> {
        self.f64(a.lr)?;
        self.f64(a.beta1)?;
        self.f64(a.beta2)?;
        self.f64(a.eps)?;
        self.u64(a.step)?;
        self.f64s(&a.m)?;
        self.f64s(&a.v)
    }

    pub fn normalizer(&mut self, n: &StateNormalizer) -> Result<()> {
        self.f64s(&n.mean)?;
        self.f64s(&n.std)
    }

    pub fn critics(&mut self, c: &CriticEnsemble) -> Result<()> {
        self.u64(c.len() as u64)?;
        self.u64(c.action_dim() as u64)?;
        for i in 0..c.len() {
            self.mlp(&c.members[i])?;
            self.mlp(&c.targets[i])?;
            self.adam(&c.optims[i])?;
        }
        Ok(())
    }
}

/// Upper bound on any length prefix, to fail fast on corrupt input.
const MAX_LEN: u64 = 1 << 32;

pub struct Decoder<'a> {
    input: &'a mut dyn Read,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a mut dyn Read) -> Self {
        Self { input }
    }

    /// Reads the magic, version and agent kind.
    pub fn header(&mut self) -> Result<AgentKind> {
        let mut magic = [0u8; 8];
        self.input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not an ensbc checkpoint"));
        }
        let version = self.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        self.str()?.parse()
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.input.read_exact(&mut b)?;
        Ok(b[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.input.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.input.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > MAX_LEN {
            return Err(Error::format(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let mut buf = vec![0u8; n];
        self.input.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| Error::format("invalid utf-8 in checkpoint"))
    }

    pub fn mlp(&mut self) -> Result<Mlp> {
        let n = self.len()?;
        let widths = (0..n).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let act = OutputActivation::from_tag(self.u8()?)?;
        let arch = Architecture::new(widths, act)?;
        Mlp::from_params(arch, self.f64s()?)
    }

    pub fn adam(&mut self) -> Result<AdamState> {
        let lr = self.f64()?;
        let beta1 = self.f64()?;
        let beta2 = self.f64()?;
        let eps = self.f64()?;
        let step = self.u64()?;
        let m = self.f64s()?;
        let v = self.f64s()?;
        if m.len() != v.len() {
            return Err(Error::format("adam moment lengths differ"));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        })
    }

    pub fn normalizer(&mut self) -> Result<StateNormalizer> {
        let mean = self.f64s()?;
        let std = self.f64s()?;
        if mean.len() != std.len() {
            return Err(Error::format("normalizer lengths differ"));
        }
        Ok(StateNormalizer { mean, std })
    }

    pub fn critics(&mut self) -> Result<CriticEnsemble> {
        let n = self.len()?;
        let action_dim = self.len()?;
        let mut members = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        let mut optims = Vec::with_capacity(n);
        for _ in 0..n {
            members.push(self.mlp()?);
            targets.push(self.mlp()?);
            optims.push(self.adam()?);
        }
        CriticEnsemble::from_parts(members, targets, optims, action_dim).map_err(|e| Error::format(e.to_string()))
    }

    /// Fails unless the input is exhausted.
    pub fn finish(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        if self.input.read(&mut b)? != 0 {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(())
    }
}

pub fn read_checkpoint(input: &mut dyn Read) -> Result<AnyAgent> {
    let mut dec = Decoder::new(input);
    let agent = match dec.header()? {
        AgentKind::Td3Bcn => AnyAgent::Td3(Td3BcnAgent::decode(&mut dec)?),
        AgentKind::SacBcn => AnyAgent::Sac(SacBcnAgent::decode(&mut dec)?),
    };
    dec.finish()?;
    Ok(agent)
}

pub fn save_checkpoint(agent: &dyn Agent, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    agent.write_checkpoint(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AnyAgent> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
