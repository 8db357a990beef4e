//! Dataset persistence.
//!
//! Layout: the magic line, a TOML header (environment, tier, dimensions,
//! size, statistics, reward transform) terminated by `END_HEADER`, then
//! `size` fixed-width little-endian records of
//! `state | action | reward | next_state` as f64 followed by one terminal byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance, RewardTransform, StateNormalizer, Transition};
use crate::env::{EnvSpec, Tier};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &str = "ENSBC-DATASET";
const FORMAT_VERSION: u32 = 1;
const END_HEADER: &str = "END_HEADER";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    tier: Tier,
    seed: u64,
    size: usize,
    state_dim: usize,
    action_dim: usize,
    record_bytes: usize,
    state_mean: Vec<f64>,
    state_std: Vec<f64>,
    reward_scale: f64,
    reward_offset: f64,
    env: EnvSpec,
}

fn record_bytes(state_dim: usize, action_dim: usize) -> usize {
    8 * (2 * state_dim + action_dim + 1) + 1
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let env = dataset.env();
    let header = Header {
        version: FORMAT_VERSION,
        tier: dataset.provenance.tier,
        seed: dataset.provenance.seed,
        size: dataset.len(),
        state_dim: env.state_dim,
        action_dim: env.action_dim,
        record_bytes: record_bytes(env.state_dim, env.action_dim),
        state_mean: dataset.normalizer.mean.clone(),
        state_std: dataset.normalizer.std.clone(),
        reward_scale: dataset.reward_transform.scale,
        reward_offset: dataset.reward_transform.offset,
        env: env.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::format(e.to_string()))?;
    writeln!(out, "{DATASET_MAGIC} {FORMAT_VERSION}")?;
    out.write_all(text.as_bytes())?;
    writeln!(out, "{END_HEADER}")?;
    let mut rec = Vec::with_capacity(header.record_bytes);
    for t in &dataset.transitions {
        rec.clear();
        for v in t.state.iter().chain(&t.action).chain(std::iter::once(&t.reward)).chain(&t.next_state) {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        rec.push(t.terminal as u8);
        out.write_all(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(mut input: R) -> Result<Dataset> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(DATASET_MAGIC) {
        return Err(Error::format("not an ensbc dataset file"));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format("missing dataset format version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let mut header_text = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(Error::format("dataset header is not terminated"));
        }
        if line.trim_end() == END_HEADER {
            break;
        }
        header_text.push_str(&line);
    }
    let header: Header = toml::from_str(&header_text).map_err(|e| Error::format(e.to_string()))?;
    if header.record_bytes != record_bytes(header.state_dim, header.action_dim)
        || header.env.state_dim != header.state_dim
        || header.env.action_dim != header.action_dim
    {
        return Err(Error::format("inconsistent dataset header"));
    }
    let (s, a) = (header.state_dim, header.action_dim);
    let mut rec = vec![0u8; header.record_bytes];
    let mut transitions = Vec::with_capacity(header.size);
    for _ in 0..header.size {
        input.read_exact(&mut rec)?;
        let mut vals = rec[..rec.len() - 1]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let state: Vec<f64> = vals.by_ref().take(s).collect();
        let action: Vec<f64> = vals.by_ref().take(a).collect();
        let reward = vals.next().unwrap();
        let next_state: Vec<f64> = vals.take(s).collect();
        let terminal = match rec[rec.len() - 1] {
            0 => false,
            1 => true,
            b => return Err(Error::format(format!("bad terminal byte {b}"))),
        };
        transitions.push(Transition {
            state,
            action,
            reward,
            next_state,
            terminal,
        });
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after dataset records"));
    }
    Ok(Dataset {
        transitions,
        provenance: Provenance {
            env: header.env,
            tier: header.tier,
            seed: header.seed,
            size: header.size,
        },
        normalizer: StateNormalizer {
            mean: header.state_mean,
            std: header.state_std,
        },
        reward_transform: RewardTransform::new(header.reward_scale, header.reward_offset),
    })
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_dataset(dataset, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Human-readable export, one transition per row.
pub fn write_csv<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let env = dataset.env();
    let mut cols: Vec<String> = Vec::new();
    cols.extend((0..env.state_dim).map(|j| format!("state_{j}")));
    cols.extend((0..env.action_dim).map(|j| format!("action_{j}")));
    cols.push("reward".into());
    cols.extend((0..env.state_dim).map(|j| format!("next_state_{j}")));
    cols.push("terminal".into());
    writeln!(out, "{}", cols.join(","))?;
    for t in &dataset.transitions {
        let mut row: Vec<String> = Vec::with_capacity(cols.len());
        row.extend(t.state.iter().map(|v| v.to_string()));
        row.extend(t.action.iter().map(|v| v.to_string()));
        row.push(t.reward.to_string());
        row.extend(t.next_state.iter().map(|v| v.to_string()));
        row.push((t.terminal as u8).to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use proptest::prelude::*;

    #[test]
    fn header_is_text_and_records_fixed_width() {
        let d = generate_dataset(&EnvSpec::point_sparse(), Tier::Medium, 37, 2).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&d, &mut bytes).unwrap();
        let marker = format!("\n{END_HEADER}\n");
        let pos = bytes.windows(marker.len()).position(|w| w == marker.as_bytes()).unwrap();
        let header = std::str::from_utf8(&bytes[..pos]).unwrap();
        assert!(header.starts_with("ENSBC-DATASET 1\n"));
        assert!(header.contains("tier = \"medium\""));
        assert_eq!(bytes.len() - pos - marker.len(), 37 * record_bytes(2, 2));
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_dataset(&b"hello\n"[..]).is_err());
        let d = generate_dataset(&EnvSpec::point_dense(), Tier::Random, 5, 2).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&d, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_dataset(&bytes[..]).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let d = generate_dataset(&EnvSpec::point_dense(), Tier::Random, 4, 2).unwrap();
        let mut out = Vec::new();
        write_csv(&d, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "state_0,state_1,action_0,action_1,reward,next_state_0,next_state_1,terminal");
        assert_eq!(lines.len(), 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_is_exact(seed in 0u64..1000, size in 1usize..200, sparse in any::<bool>(),
                               scale in -5.0f64..5.0, offset in -1.0f64..1.0) {
            let env = if sparse { EnvSpec::point_sparse() } else { EnvSpec::point_dense() };
            let d = generate_dataset(&env, Tier::MediumReplay, size, seed)
                .unwrap()
                .with_reward_transform(RewardTransform::new(scale, offset));
            let mut bytes = Vec::new();
            write_dataset(&d, &mut bytes).unwrap();
            let back = read_dataset(&bytes[..]).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
